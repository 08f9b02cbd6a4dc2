use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cadenza::corpus::{self, CorpusIndex, LabelRules, Split, SyntheticGenreSpec};
use cadenza::corruption::{corrupt, corrupt_notes, CorruptionKind};
use cadenza::engine::{
    self, DrawMode, GenerationOptions, KindChoice, PassSchedule, PassSpec, PassState, PreservationMask,
};
use cadenza::metrics::{reports_to_csv, MetricOptions, MetricsReport, TensionDistance};
use cadenza::model::{
    read_checkpoint, train_classifier, write_checkpoint, Checkpoint, ClassifierTrainConfig, GenreClassifier, Preset,
    Refiner, RefinerTrainConfig, RefinerTrainer, TrainingPiece,
};
use cadenza::tokenizer::{decode, desegment, encode, segment, Segment, Token, TokenSequence, BINARY_MAGIC};
use cadenza::{parse_midi, write_midi, Genre, Piece};

use crate::args::*;
use crate::input;

pub const MODEL_DIR_ENV: &str = "CADENZA_MODEL_DIR";

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Tokenize(a) => tokenize(a),
        Command::Detokenize(a) => detokenize(a),
        Command::Corrupt(a) => corrupt_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Scan(a) => scan(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::Improvise(a) => improvise(a),
        Command::Continue(a) => continue_cmd(a),
        Command::Infill(a) => infill(a),
        Command::Harmonize(a) => harmonize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run { config } => {
            let text = fs::read_to_string(&config).map_err(|e| input(format!("cannot read {}: {e}", config.display())))?;
            let cmd: Command =
                serde_json::from_str(&text).map_err(|e| input(format!("bad run config {}: {e}", config.display())))?;
            execute(cmd)
        }
    }
}

fn read_piece(path: &Path) -> Result<Piece> {
    let bytes = fs::read(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(input(format!("{} is empty", path.display())));
    }
    let parsed = parse_midi(&bytes).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let mut piece = parsed.piece;
    if piece.source_id.is_empty() {
        piece.source_id = file_stem(path);
    }
    Ok(piece)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn is_midi_path(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

fn parse_genre(s: &str) -> Result<Genre> {
    s.parse().map_err(|_| input(format!("unknown genre `{s}` (expected classical or jazz)")))
}

fn parse_kind(s: &str) -> Result<CorruptionKind> {
    s.parse().map_err(|e| input(e))
}

fn write_tokens(path: &Path, seq: &TokenSequence) -> Result<()> {
    if path.extension().is_some_and(|e| e == "bin") {
        write_bytes(path, &seq.to_bytes())
    } else {
        let mut w = create(path)?;
        seq.write_text(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn read_tokens(path: &Path) -> Result<TokenSequence> {
    let bytes = fs::read(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    let seq = if bytes.starts_with(&BINARY_MAGIC) {
        TokenSequence::from_bytes(&bytes)
    } else {
        TokenSequence::read_text(&bytes[..])
    };
    seq.map_err(|e| input(format!("{}: {e}", path.display())))
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    let piece = read_piece(&a.input)?;
    write_tokens(&a.output, &encode(&segment(&piece)))
}

fn detokenize(a: DetokenizeArgs) -> Result<()> {
    let seq = read_tokens(&a.input)?;
    let decoded = decode(&seq.tokens).map_err(|e| input(format!("{}: {e}", a.input.display())))?;
    write_bytes(&a.output, &write_midi(&desegment(&decoded.segments, None, file_stem(&a.input))))
}

/// Per-segment seed derived from the command seed.
fn segment_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn corrupt_cmd(a: CorruptArgs) -> Result<()> {
    let kind = parse_kind(&a.kind)?;
    let piece = read_piece(&a.input)?;
    let segments = segment(&piece);
    if is_midi_path(&a.output) {
        if kind.uses_masks() {
            return Err(input(format!("{kind} produces mask tokens and cannot be written as MIDI; use a token output")));
        }
        let out: Vec<Segment> = segments
            .iter()
            .map(|s| corrupt_notes(s, kind, segment_seed(a.seed, s.index)).expect("note-level kind"))
            .collect();
        return write_bytes(&a.output, &write_midi(&desegment(&out, piece.genre, piece.source_id.clone())));
    }
    let genre = match &a.genre {
        Some(g) => parse_genre(g)?,
        None => piece.genre.unwrap_or(Genre::Classical),
    };
    let mut tokens = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        if i > 0 {
            tokens.push(Token::SegmentSep);
        }
        tokens.extend(corrupt(s, kind, genre, segment_seed(a.seed, s.index)).tokens);
    }
    write_tokens(&a.output, &TokenSequence::new(tokens))
}

fn synth(a: SynthArgs) -> Result<()> {
    let (mut c, mut j) = (SyntheticGenreSpec::classical(), SyntheticGenreSpec::jazz());
    if a.melody_only {
        c = c.melody_only();
        j = j.melody_only();
    }
    let pieces = corpus::generate_synthetic(&c, &j, a.pieces_per_genre, a.seed).map_err(input)?;
    for p in &pieces {
        let genre = p.genre.expect("synthetic pieces are labeled");
        let path = a.output.join(genre.name()).join(format!("{}.mid", p.source_id));
        write_bytes(&path, &write_midi(p))?;
    }
    println!("wrote {} pieces to {}", pieces.len(), a.output.display());
    Ok(())
}

fn scan(a: ScanArgs) -> Result<()> {
    let rules = LabelRules::parse(&a.labels).map_err(input)?;
    let index = corpus::scan(&a.root, &rules).map_err(input)?;
    for e in &index.errors {
        log::warn!("skipped {}: {}", e.path, e.error);
    }
    write_bytes(&a.output, index.to_json().as_bytes())?;
    println!("indexed {} files ({} unreadable)", index.entries.len(), index.errors.len());
    Ok(())
}

fn load_index(path: &Path) -> Result<CorpusIndex> {
    let text = fs::read_to_string(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    CorpusIndex::from_json(&text).map_err(input)
}

fn split(a: SplitArgs) -> Result<()> {
    let index = load_index(&a.index)?.split(a.test_count, a.seed).map_err(input)?;
    write_bytes(&a.output, index.to_json().as_bytes())
}

/// Training pieces from an index (train split if the index is split) or a
/// directory scanned on the fly.
fn load_training(c: &CorpusArgs) -> Result<Vec<TrainingPiece>> {
    let (index, root) = match (&c.index, &c.corpus) {
        (Some(path), _) => {
            let index = load_index(path)?;
            let root = match &index.root {
                Some(r) if r.is_absolute() => r.clone(),
                Some(r) => path.parent().unwrap_or(Path::new(".")).join(r).canonicalize().unwrap_or(r.clone()),
                None => path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            };
            (index, root)
        }
        (None, Some(dir)) => (corpus::scan(dir, &LabelRules::default()).map_err(input)?, dir.clone()),
        (None, None) => return Err(input("either --index or --corpus is required")),
    };
    let split = index.entries.iter().any(|e| e.split.is_some()).then_some(Split::Train);
    let pieces = index.load_pieces(&root, split).map_err(input)?;
    let training = corpus::training_pieces(&pieces);
    if training.is_empty() {
        return Err(input("the corpus has no genre-labeled pieces"));
    }
    Ok(training)
}

fn preset(p: PresetArg) -> Preset {
    match p {
        PresetArg::Micro => Preset::Micro,
        PresetArg::Tiny => Preset::Tiny,
        PresetArg::Desk => Preset::Desk,
        PresetArg::Full => Preset::Full,
    }
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(ck, &mut w)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| input(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(f)).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = load_training(&a.corpus)?;
    if !(1..=engine::MAX_CONTEXT).contains(&a.max_context) {
        return Err(input(format!("--max-context must be 1..={}", engine::MAX_CONTEXT)));
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = load_checkpoint(path)?.into_trainer().map_err(input)?;
            t.config.steps = a.steps;
            t
        }
        None => {
            let p = preset(a.preset);
            let kinds = if a.kinds.is_empty() {
                CorruptionKind::ALL.to_vec()
            } else {
                a.kinds.iter().map(|k| parse_kind(k)).collect::<Result<_>>()?
            };
            let cfg = RefinerTrainConfig {
                steps: a.steps,
                batch_size: a.batch_size,
                learning_rate: a.learning_rate,
                warmup_ratio: p.warmup_ratio(),
                seed: a.seed,
                max_context: a.max_context,
                kinds,
                cross_genre_context: a.cross_genre_context,
                ..Default::default()
            };
            RefinerTrainer::new(Refiner::new(p.refiner(), a.seed), cfg)
        }
    };
    let every = a.checkpoint_every.filter(|&k| k > 0);
    let mut failure = None;
    let result = trainer.train(&corpus, |t| {
        if t.step() % 50 == 0 {
            log::info!("step {} loss {:.4}", t.step(), t.losses.last().map_or(f64::NAN, |l| l.1));
        }
        if every.is_some_and(|k| t.step() % k == 0) && failure.is_none() {
            failure = save_checkpoint(&a.output, &Checkpoint::from_trainer(t)).err();
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result.map_err(input)?;
    save_checkpoint(&a.output, &Checkpoint::from_trainer(&trainer))?;
    if let Some(path) = &a.loss_csv {
        write_bytes(path, trainer.loss_csv().as_bytes())?;
    }
    if let Some((step, loss)) = trainer.losses.last() {
        println!("trained {step} steps, final loss {loss:.4}");
    } else {
        println!("wrote untrained model");
    }
    Ok(())
}

fn train_classifier_cmd(a: TrainClassifierArgs) -> Result<()> {
    let corpus = load_training(&a.corpus)?;
    let mut clf = GenreClassifier::<f32>::new(preset(a.preset).classifier(), a.seed);
    let cfg = ClassifierTrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ..Default::default()
    };
    let report = train_classifier(&mut clf, &corpus, &cfg).map_err(input)?;
    save_checkpoint(&a.output, &Checkpoint::from_classifier(&clf))?;
    println!("training accuracy {:.3}", report.train_accuracy);
    Ok(())
}

fn model_path(explicit: &Option<PathBuf>, file: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    match std::env::var_os(MODEL_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join(file)),
        None => Err(input(format!("no model given: pass --model or set {MODEL_DIR_ENV}"))),
    }
}

fn load_refiner(g: &GenerationArgs) -> Result<Refiner> {
    let path = model_path(&g.model, "refiner.ckpt")?;
    load_checkpoint(&path)?.into_refiner().map_err(|e| input(format!("{}: {e}", path.display())))
}

fn options(g: &GenerationArgs, genre: Genre) -> GenerationOptions {
    let d = GenerationOptions::new(genre);
    GenerationOptions {
        genre,
        left: g.left.unwrap_or(d.left),
        right: g.right.unwrap_or(d.right),
        temperature: g.temperature.unwrap_or(d.temperature),
        seed: g.seed.unwrap_or(d.seed),
    }
}

fn finish(g: &GenerationArgs, state: &PassState, genre: Option<Genre>, source_id: &str) -> Result<()> {
    write_bytes(&g.output, &write_midi(&desegment(&state.segments, genre, source_id)))?;
    if let Some(p) = &g.provenance {
        write_bytes(p, state.provenance_jsonl().as_bytes())?;
    }
    Ok(())
}

fn engine_error(e: engine::EngineError) -> anyhow::Error {
    use engine::EngineError::*;
    match e {
        Model(m) => anyhow::Error::new(m),
        other => input(other),
    }
}

fn improvise(a: ImproviseArgs) -> Result<()> {
    let piece = read_piece(&a.input)?;
    let mut schedule = match &a.schedule {
        Some(path) => PassSchedule::load(path).map_err(input)?,
        None => {
            let genre = match &a.genre {
                Some(g) => parse_genre(g)?,
                None => piece.genre.map_or(Genre::Jazz, Genre::other),
            };
            let template = PassSpec {
                kind: KindChoice::Fixed(CorruptionKind::WholeMask),
                alpha: 1.0,
                left: 2,
                right: 2,
                target_genre: genre,
                temperature: 1.0,
                seed: 0,
            };
            PassSchedule::repeated(template, a.passes.max(1))
        }
    };
    let kind: Option<KindChoice> = a.kind.as_deref().map(|k| k.parse().map_err(input)).transpose()?;
    let genre = a.genre.as_deref().map(parse_genre).transpose()?;
    for (q, p) in schedule.passes.iter_mut().enumerate() {
        p.kind = kind.unwrap_or(p.kind);
        p.alpha = a.alpha.unwrap_or(p.alpha);
        p.left = a.gen.left.unwrap_or(p.left);
        p.right = a.gen.right.unwrap_or(p.right);
        p.target_genre = genre.unwrap_or(p.target_genre);
        p.temperature = a.gen.temperature.unwrap_or(p.temperature);
        if let Some(s) = a.gen.seed {
            p.seed = s.wrapping_add(q as u64);
        }
    }
    if a.per_pass_draw {
        schedule.draw = DrawMode::PerPass;
    }
    schedule.validate().map_err(input)?;
    let refiner = load_refiner(&a.gen)?;
    let segments = segment(&piece);
    if segments.is_empty() {
        return Err(input(format!("{} has no notes", a.input.display())));
    }
    let mask = if a.preserve > 0.0 {
        engine::select_preserved(&segments, a.preserve)
    } else {
        PreservationMask::endpoints(segments.len())
    };
    let state = engine::improvise(&segments, &refiner, &schedule, &mask).map_err(engine_error)?;
    let target = schedule.passes.last().map(|p| p.target_genre);
    finish(&a.gen, &state, target, &piece.source_id)
}

fn default_genre(arg: &Option<String>, piece: &Piece) -> Result<Genre> {
    match arg {
        Some(g) => parse_genre(g),
        None => Ok(piece.genre.unwrap_or(Genre::Classical)),
    }
}

fn continue_cmd(a: ContinueArgs) -> Result<()> {
    let piece = read_piece(&a.input)?;
    let genre = default_genre(&a.genre, &piece)?;
    let refiner = load_refiner(&a.gen)?;
    let state = engine::continue_prompt(&segment(&piece), &refiner, a.segments, &options(&a.gen, genre))
        .map_err(engine_error)?;
    finish(&a.gen, &state, Some(genre), &piece.source_id)
}

fn infill(a: InfillArgs) -> Result<()> {
    let before = read_piece(&a.before)?;
    let after = read_piece(&a.after)?;
    let genre = default_genre(&a.genre, &before)?;
    let refiner = load_refiner(&a.gen)?;
    let state = engine::infill(&segment(&before), &segment(&after), &refiner, a.segments, &options(&a.gen, genre))
        .map_err(engine_error)?;
    finish(&a.gen, &state, Some(genre), &before.source_id)
}

fn harmonize(a: HarmonizeArgs) -> Result<()> {
    let piece = read_piece(&a.input)?;
    let genre = default_genre(&a.genre, &piece)?;
    let refiner = load_refiner(&a.gen)?;
    let h = engine::harmonize(&segment(&piece), &refiner, a.chord_notes, a.extra_passes, &options(&a.gen, genre))
        .map_err(engine_error)?;
    finish(&a.gen, &h.state, Some(genre), &piece.source_id)?;
    let report = serde_json::to_string_pretty(&h.report)?;
    match &a.report {
        Some(p) => write_bytes(p, report.as_bytes())?,
        None => println!("{report}"),
    }
    Ok(())
}

fn metric_options(a: &EvaluateArgs) -> Result<MetricOptions> {
    let selected = if a.metrics.trim() == "all" {
        None
    } else {
        let names: Vec<String> = a.metrics.split(',').map(|s| s.trim().to_string()).collect();
        if let Some(bad) = names.iter().find(|n| !MetricsReport::COLUMNS.contains(&n.as_str())) {
            return Err(input(format!("unknown metric `{bad}`; known: {}", MetricsReport::COLUMNS.join(", "))));
        }
        Some(names)
    };
    Ok(MetricOptions {
        selected,
        tension_distance: match a.tension {
            TensionArg::Fifths => TensionDistance::CircleOfFifths,
            TensionArg::Semitone => TensionDistance::Semitone,
        },
        ioi_include_simultaneous: a.ioi_include_simultaneous,
        target_genre: a.target_genre.as_deref().map(parse_genre).transpose()?,
    })
}

fn load_classifier(a: &EvaluateArgs) -> Result<Option<GenreClassifier<f32>>> {
    let path = match &a.classifier {
        Some(p) => p.clone(),
        None => match std::env::var_os(MODEL_DIR_ENV) {
            Some(dir) if Path::new(&dir).join("classifier.ckpt").is_file() => Path::new(&dir).join("classifier.ckpt"),
            _ => return Ok(None),
        },
    };
    Ok(Some(load_checkpoint(&path)?.into_classifier().map_err(|e| input(format!("{}: {e}", path.display())))?))
}

fn report_for(
    original: &Piece,
    generated: &Piece,
    opts: &MetricOptions,
    clf: Option<&GenreClassifier<f32>>,
) -> Result<MetricsReport> {
    let mut r = MetricsReport::compute(original, generated, opts);
    let wanted = opts.selected.as_ref().is_none_or(|s| s.iter().any(|m| m == "genre_probability"));
    if let (Some(clf), true) = (clf, wanted) {
        let genre = opts.target_genre.or(generated.genre).unwrap_or(Genre::Jazz);
        let segs = segment(generated);
        if !segs.is_empty() {
            r.genre_probability = Some(clf.genre_probability(&segs, genre)?);
        }
    }
    Ok(r)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let opts = metric_options(&a)?;
    let clf = load_classifier(&a)?;
    if a.original.is_dir() && a.generated.is_dir() {
        return evaluate_batch(&a, &opts, clf.as_ref());
    }
    let original = read_piece(&a.original)?;
    let generated = read_piece(&a.generated)?;
    let report = serde_json::to_string_pretty(&report_for(&original, &generated, &opts, clf.as_ref())?)?;
    match &a.output {
        Some(p) => write_bytes(p, report.as_bytes()),
        None => {
            println!("{report}");
            Ok(())
        }
    }
}

fn midi_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| input(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_midi_path(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Pairs files with the same name in both directories and evaluates the
/// pairs on worker threads; rows keep the sorted file order.
fn evaluate_batch(a: &EvaluateArgs, opts: &MetricOptions, clf: Option<&GenreClassifier<f32>>) -> Result<()> {
    let pairs: Vec<(PathBuf, PathBuf)> = midi_files(&a.original)?
        .into_iter()
        .filter_map(|o| {
            let g = a.generated.join(o.file_name()?);
            g.is_file().then_some((o, g))
        })
        .collect();
    if pairs.is_empty() {
        bail!(input("no file names are shared between the two directories"));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(pairs.len());
    let chunk = pairs.len().div_ceil(workers);
    let results: Vec<Result<Vec<(String, String, MetricsReport)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(o, g)| {
                            let r = report_for(&read_piece(o)?, &read_piece(g)?, opts, clf)?;
                            Ok((o.display().to_string(), g.display().to_string(), r))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(pairs.len());
    for r in results {
        rows.extend(r?);
    }
    let csv = reports_to_csv(&rows);
    match &a.output {
        Some(p) => write_bytes(p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
