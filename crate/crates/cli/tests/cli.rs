use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cadenza::corpus::CorpusIndex;
use cadenza::metrics::polyphony_rate;
use cadenza::{parse_midi, write_midi, Genre, NoteEvent, Piece};
use tempfile::TempDir;

fn cadenza(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadenza"))
        .args(args)
        .env_remove("CADENZA_MODEL_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cadenza(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Chords every second, melody notes in between, `seconds` long.
fn chordal_piece(seconds: u32) -> Piece {
    let mut events = Vec::new();
    for s in 0..seconds {
        let t = s * 1000;
        for (k, pitch) in [48u8, 52, 55].into_iter().enumerate() {
            events.push(NoteEvent::new(pitch + (s % 3) as u8, 60 + 15 * k as u8, t, 400));
        }
        events.push(NoteEvent::new(72 - (s % 5) as u8, 90, t + 500, 300));
    }
    Piece::new(events, Some(Genre::Classical), "fixture")
}

fn melody(seconds: u32) -> Piece {
    let events = (0..seconds * 2).map(|i| NoteEvent::new(60 + (i % 7) as u8, 75, i * 500, 400)).collect();
    Piece::new(events, Some(Genre::Classical), "melody")
}

fn write_piece(dir: &Path, name: &str, piece: &Piece) -> PathBuf {
    let path = dir.join(name);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, write_midi(piece)).unwrap();
    path
}

fn read(path: &Path) -> Piece {
    parse_midi(&fs::read(path).unwrap()).unwrap().piece
}

/// An untrained micro checkpoint in `dir/refiner.ckpt`.
fn micro_model(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    ok(&["synth", p(&corpus), "--pieces-per-genre", "1", "--seed", "2"]);
    let model = dir.join("refiner.ckpt");
    ok(&["train", "--corpus", p(&corpus), "--preset", "micro", "--steps", "0", "-o", p(&model)]);
    model
}

#[test]
fn tokenize_detokenize_round_trip() {
    let dir = TempDir::new().unwrap();
    let mid = write_piece(dir.path(), "a.mid", &chordal_piece(12));
    for ext in ["txt", "bin"] {
        let tokens = dir.path().join(format!("a.{ext}"));
        let back = dir.path().join(format!("back_{ext}.mid"));
        let again = dir.path().join(format!("again.{ext}"));
        ok(&["tokenize", p(&mid), p(&tokens)]);
        ok(&["detokenize", p(&tokens), p(&back)]);
        ok(&["tokenize", p(&back), p(&again)]);
        assert_eq!(fs::read(&tokens).unwrap(), fs::read(&again).unwrap());
        assert_eq!(read(&back).events, chordal_piece(12).events);
    }
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.mid");
    fs::write(&bad, b"MThd\x00\x00\x00\x06\x00\x01\x00\x01\x01\xe0MTrk\x00\x00\x00\x10\x00\x90").unwrap();
    let out = cadenza(&["tokenize", p(&bad), p(&dir.path().join("x.txt"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    let empty = dir.path().join("empty.mid");
    fs::write(&empty, b"").unwrap();
    assert_eq!(code(&cadenza(&["tokenize", p(&empty), p(&dir.path().join("y.txt"))])), 2);
    assert_eq!(code(&cadenza(&["tokenize", p(&dir.path().join("missing.mid")), "z.txt"])), 2);
    assert_eq!(code(&cadenza(&["tokenize"])), 2);
}

#[test]
fn corrupt_command() {
    let dir = TempDir::new().unwrap();
    let mid = write_piece(dir.path(), "a.mid", &chordal_piece(12));
    let sky = dir.path().join("sky.mid");
    ok(&["corrupt", p(&mid), p(&sky), "--kind", "skyline"]);
    let melody = read(&sky);
    assert!(!melody.is_empty());
    assert_eq!(polyphony_rate(&melody), 0.0);

    let out = cadenza(&["corrupt", p(&mid), p(&sky), "--kind", "blur"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("skyline") && err.contains("whole-mask"), "{err}");

    let (a, b) = (dir.path().join("a1.mid"), dir.path().join("a2.mid"));
    ok(&["corrupt", p(&mid), p(&a), "--kind", "permute-pitch", "--seed", "9"]);
    ok(&["corrupt", p(&mid), p(&b), "--kind", "permute-pitch", "--seed", "9"]);
    assert!(fs::read(&a).unwrap() == fs::read(&b).unwrap(), "outputs differ");

    assert_eq!(code(&cadenza(&["corrupt", p(&mid), p(&a), "--kind", "whole-mask"])), 2);
    let tokens = dir.path().join("masked.txt");
    ok(&["corrupt", p(&mid), p(&tokens), "--kind", "whole-mask", "--genre", "jazz"]);
    let text = fs::read_to_string(&tokens).unwrap();
    assert!(text.contains("MASK_WHOLE"), "{text}");
}

#[test]
fn synth_scan_and_split() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth", p(&corpus), "--pieces-per-genre", "2", "--seed", "1"]);
    fs::write(corpus.join("jazz").join("broken.mid"), b"not midi").unwrap();
    let index = dir.path().join("index.json");
    ok(&["scan", p(&corpus), "-o", p(&index)]);
    let parsed = CorpusIndex::from_json(&fs::read_to_string(&index).unwrap()).unwrap();
    assert_eq!((parsed.entries.len(), parsed.errors.len()), (4, 1));
    assert!(parsed.entries.iter().all(|e| e.genre.is_some()));

    let split = dir.path().join("split.json");
    ok(&["split", p(&index), "-o", p(&split), "--test-count", "1", "--seed", "3"]);
    let s = CorpusIndex::from_json(&fs::read_to_string(&split).unwrap()).unwrap();
    assert_eq!(s.entries.iter().filter(|e| e.split == Some(cadenza::corpus::Split::Test)).count(), 1);
    assert_eq!(code(&cadenza(&["split", p(&index), "-o", p(&split), "--test-count", "9"])), 2);
    assert_eq!(code(&cadenza(&["scan", p(&dir.path().join("nope")), "-o", p(&split)])), 2);
}

#[test]
fn training_writes_checkpoints_and_resumes_deterministically() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth", p(&corpus), "--pieces-per-genre", "1", "--seed", "5"]);
    let common = ["--corpus", p(&corpus), "--preset", "micro", "--batch-size", "2", "--max-context", "1"];
    let full = dir.path().join("full.ckpt");
    let csv = dir.path().join("loss.csv");
    let mut args = vec!["train", "--steps", "4", "-o", p(&full), "--loss-csv", p(&csv)];
    args.extend(common);
    ok(&args);
    let lines = fs::read_to_string(&csv).unwrap();
    assert_eq!(lines.lines().count(), 5);

    let periodic = dir.path().join("periodic.ckpt");
    let mut args = vec!["train", "--steps", "4", "--checkpoint-every", "2", "-o", p(&periodic)];
    args.extend(common);
    ok(&args);
    assert!(fs::read(&full).unwrap() == fs::read(&periodic).unwrap(), "checkpointing changed the run");

    let resumed = dir.path().join("resumed.ckpt");
    let mut args = vec!["train", "--steps", "4", "--resume", p(&full), "-o", p(&resumed)];
    args.extend(common);
    ok(&args);
    assert!(fs::read(&full).unwrap() == fs::read(&resumed).unwrap(), "resumed checkpoint differs");

    let clf = dir.path().join("clf.ckpt");
    ok(&["train-classifier", "--corpus", p(&corpus), "--preset", "micro", "--steps", "2", "-o", p(&clf)]);
    assert!(clf.is_file());
}

#[test]
fn improvise_with_zero_alpha_returns_the_quantized_input() {
    let dir = TempDir::new().unwrap();
    let model = micro_model(dir.path());
    let mid = write_piece(dir.path(), "in.mid", &chordal_piece(20));
    let out = dir.path().join("out.mid");
    let prov = dir.path().join("prov.jsonl");
    ok(&["improvise", p(&mid), "--model", p(&model), "--alpha", "0", "--passes", "2", "-o", p(&out), "--provenance", p(&prov)]);
    assert_eq!(read(&out).events, chordal_piece(20).events);
    assert_eq!(fs::read_to_string(&prov).unwrap().lines().count(), 8);

    // The model directory can come from the environment.
    let status = Command::new(env!("CARGO_BIN_EXE_cadenza"))
        .args(["improvise", p(&mid), "--alpha", "0", "-o", p(&out)])
        .env("CADENZA_MODEL_DIR", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(code(&cadenza(&["improvise", p(&mid), "--alpha", "0", "-o", p(&out)])), 2);
    assert_eq!(code(&cadenza(&["improvise", p(&mid), "--model", p(&model), "--alpha", "2", "-o", p(&out)])), 2);
}

#[test]
fn schedule_files_and_saved_configs() {
    let dir = TempDir::new().unwrap();
    let model = micro_model(dir.path());
    let mid = write_piece(dir.path(), "in.mid", &chordal_piece(20));
    let schedule = dir.path().join("s.toml");
    fs::write(
        &schedule,
        "[[passes]]\nkind = \"permute-pitch\"\nalpha = 0.5\nleft = 1\nright = 1\ntarget_genre = \"jazz\"\nseed = 4\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a.mid"), dir.path().join("b.mid"));
    let config = dir.path().join("run.json");
    ok(&["improvise", p(&mid), "--model", p(&model), "--schedule", p(&schedule), "-o", p(&a), "--save-config", p(&config)]);
    let saved = fs::read_to_string(&config).unwrap().replace(p(&a), p(&b));
    fs::write(&config, saved).unwrap();
    ok(&["run", p(&config)]);
    assert!(fs::read(&a).unwrap() == fs::read(&b).unwrap(), "outputs differ");
}

#[test]
fn continue_infill_and_harmonize() {
    let dir = TempDir::new().unwrap();
    let model = micro_model(dir.path());
    let prompt = write_piece(dir.path(), "prompt.mid", &chordal_piece(20));
    let out = dir.path().join("cont.mid");
    let prov = dir.path().join("cont.jsonl");
    ok(&["continue", p(&prompt), "--model", p(&model), "--segments", "3", "-o", p(&out), "--provenance", p(&prov)]);
    let log = fs::read_to_string(&prov).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.contains("\"whole-mask\"") && l.contains("\"right\":0")));
    assert!(read(&out).events.iter().all(|e| e.onset_ms < 35_000));

    let filled = dir.path().join("fill.mid");
    ok(&["infill", p(&prompt), p(&prompt), "--model", p(&model), "--segments", "2", "-o", p(&filled)]);
    assert!(read(&filled).events.iter().all(|e| e.onset_ms < 50_000));

    let tune = write_piece(dir.path(), "tune.mid", &melody(15));
    let harm = dir.path().join("harm.mid");
    let report = dir.path().join("report.json");
    ok(&["harmonize", p(&tune), "--model", p(&model), "-o", p(&harm), "--report", p(&report)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["satisfied"], r["segments"]);
    assert!(r["violations"].as_array().unwrap().is_empty());

    let out = cadenza(&["harmonize", p(&prompt), "--model", p(&model), "-o", p(&harm)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("monophonic"));
}

#[test]
fn evaluate_single_and_batch() {
    let dir = TempDir::new().unwrap();
    let a = write_piece(dir.path(), "orig/x.mid", &chordal_piece(30));
    write_piece(dir.path(), "orig/y.mid", &melody(30));
    write_piece(dir.path(), "gen/x.mid", &chordal_piece(30));
    write_piece(dir.path(), "gen/y.mid", &chordal_piece(25));
    write_piece(dir.path(), "gen/z.mid", &melody(10));
    let report = dir.path().join("r.json");
    ok(&["evaluate", p(&a), p(&a), "-o", p(&report)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["pitch_class_kl"], 0.0);
    assert_eq!(r["pctm_cosine"], 1.0);
    assert_eq!(r["ssm_correlation"], 1.0);

    assert_eq!(code(&cadenza(&["evaluate", p(&a), p(&dir.path().join("nope.mid"))])), 2);
    assert_eq!(code(&cadenza(&["evaluate", p(&a), p(&a), "--metrics", "loudness"])), 2);

    let csv = dir.path().join("batch.csv");
    ok(&["evaluate", p(&dir.path().join("orig")), p(&dir.path().join("gen")), "-o", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().contains("x.mid"));
}
