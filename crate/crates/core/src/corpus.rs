//! Corpus indexing, deterministic train/test splits, and a synthetic
//! two-genre piano corpus.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::midi::{parse_midi, Genre, NoteEvent, Piece};
use crate::model::TrainingPiece;
use crate::tokenizer::segment;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("cannot take {wanted} test pieces from a corpus of {available}")]
    SplitTooLarge { wanted: usize, available: usize },
    #[error("bad label rule `{0}` (expected genre=directory)")]
    BadRule(String),
    #[error("corpus index: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub genre: Option<Genre>,
    pub duration_ms: u32,
    pub note_count: usize,
    /// SHA-256 of the file bytes, lowercase hex.
    pub checksum: String,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanFailure {
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusIndex {
    /// Directory the entry paths are relative to, as given to [`scan`].
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub entries: Vec<CorpusEntry>,
    pub errors: Vec<ScanFailure>,
}

/// Assigns genres from directory names: a file is labeled with the first
/// rule whose directory name appears among its parent directories.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRules {
    pub rules: Vec<(String, Genre)>,
}

impl LabelRules {
    /// Parses `genre=dir` pairs, e.g. `["jazz=pijama", "classical=maestro"]`.
    pub fn parse<S: AsRef<str>>(specs: &[S]) -> Result<Self, CorpusError> {
        let rules = specs
            .iter()
            .map(|s| {
                let s = s.as_ref();
                let (g, dir) = s.split_once('=').ok_or_else(|| CorpusError::BadRule(s.to_string()))?;
                let genre = g.parse::<Genre>().map_err(|_| CorpusError::BadRule(s.to_string()))?;
                Ok((dir.to_string(), genre))
            })
            .collect::<Result<_, CorpusError>>()?;
        Ok(Self { rules })
    }

    /// Genre for a root-relative path. With no rules, the immediate parent
    /// directory is tried as a genre name.
    pub fn label(&self, rel: &Path) -> Option<Genre> {
        let dirs: Vec<String> = rel
            .parent()
            .into_iter()
            .flat_map(|p| p.components())
            .map(|c| c.as_os_str().to_string_lossy().to_ascii_lowercase())
            .collect();
        if self.rules.is_empty() {
            return dirs.last().and_then(|d| d.parse().ok());
        }
        self.rules.iter().find(|(dir, _)| dirs.iter().any(|d| *d == dir.to_ascii_lowercase())).map(|(_, g)| *g)
    }
}

fn is_midi(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn rel_string(rel: &Path) -> String {
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Indexes every `.mid`/`.midi` file under `root` in path order. Files that
/// fail to parse are recorded in `errors` and otherwise skipped.
pub fn scan(root: &Path, rules: &LabelRules) -> Result<CorpusIndex, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::MissingRoot(root.to_path_buf()));
    }
    let mut index = CorpusIndex { root: Some(root.to_path_buf()), ..Default::default() };
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Io(e.into()))?;
        if !entry.file_type().is_file() || !is_midi(entry.path()) {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let path = rel_string(rel);
        let bytes = fs::read(entry.path())?;
        match parse_midi(&bytes) {
            Ok(parsed) => index.entries.push(CorpusEntry {
                genre: rules.label(rel),
                duration_ms: parsed.piece.end_ms(),
                note_count: parsed.piece.events.len(),
                checksum: hex(&Sha256::digest(&bytes)),
                split: None,
                path,
            }),
            Err(e) => index.errors.push(ScanFailure { path, error: e.to_string() }),
        }
    }
    Ok(index)
}

impl CorpusIndex {
    /// Marks `test_count` randomly chosen entries as test and the rest as
    /// train; the choice depends only on `seed` and the entry paths.
    pub fn split(&self, test_count: usize, seed: u64) -> Result<CorpusIndex, CorpusError> {
        let n = self.entries.len();
        if test_count > n {
            return Err(CorpusError::SplitTooLarge { wanted: test_count, available: n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.entries[a].path.cmp(&self.entries[b].path));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for e in &mut out.entries {
            e.split = Some(Split::Train);
        }
        for &i in &order[..test_count] {
            out.entries[i].split = Some(Split::Test);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index is serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        serde_json::from_str(s).map_err(|e| CorpusError::Format(e.to_string()))
    }

    /// Parses the indexed files (optionally one split only) into pieces
    /// labeled with their index genre.
    pub fn load_pieces(&self, root: &Path, split: Option<Split>) -> Result<Vec<Piece>, CorpusError> {
        self.entries
            .iter()
            .filter(|e| split.is_none() || e.split == split)
            .map(|e| {
                let bytes = fs::read(root.join(&e.path))?;
                let mut piece = parse_midi(&bytes).map_err(|err| CorpusError::Format(format!("{}: {err}", e.path)))?.piece;
                piece.genre = e.genre.or(piece.genre);
                piece.source_id = e.path.clone();
                Ok(piece)
            })
            .collect()
    }
}

/// Segments labeled pieces for training; unlabeled pieces are skipped.
pub fn training_pieces(pieces: &[Piece]) -> Vec<TrainingPiece> {
    pieces
        .iter()
        .filter_map(|p| Some(TrainingPiece { segments: segment(p), genre: p.genre? }))
        .collect()
}

/// Recipe for one synthetic genre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenreSpec {
    pub genre: Genre,
    /// Allowed pitch classes; every generated note uses one of them.
    pub palette: Vec<u8>,
    pub beat_ms: u32,
    /// Onset offsets within a beat where melody notes may start.
    pub beat_offsets: Vec<u32>,
    pub velocity_range: (u8, u8),
    /// Probability that a beat carries a chord under the melody.
    pub chord_probability: f64,
    /// Fraction of the gap to the next onset a melody note sounds for.
    pub articulation: f64,
    pub melody_range: (u8, u8),
    pub chord_range: (u8, u8),
    pub length_ms: (u32, u32),
    /// Random onset displacement in milliseconds, for a performed feel.
    pub timing_jitter_ms: u32,
}

impl SyntheticGenreSpec {
    /// Diatonic C major, straight eighths, soft dynamics, legato.
    pub fn classical() -> Self {
        Self {
            genre: Genre::Classical,
            palette: vec![0, 2, 4, 5, 7, 9, 11],
            beat_ms: 500,
            beat_offsets: vec![0, 250],
            velocity_range: (45, 90),
            chord_probability: 0.5,
            articulation: 0.95,
            melody_range: (62, 84),
            chord_range: (43, 60),
            length_ms: (60_000, 120_000),
            timing_jitter_ms: 8,
        }
    }

    /// Chromatic-leaning palette, swung eighths, louder and detached.
    pub fn jazz() -> Self {
        Self {
            genre: Genre::Jazz,
            palette: vec![0, 1, 3, 4, 6, 7, 8, 10],
            beat_ms: 600,
            beat_offsets: vec![0, 400],
            velocity_range: (60, 110),
            chord_probability: 0.5,
            articulation: 0.6,
            melody_range: (60, 82),
            chord_range: (45, 62),
            length_ms: (60_000, 120_000),
            timing_jitter_ms: 12,
        }
    }

    pub fn preset(genre: Genre) -> Self {
        match genre {
            Genre::Classical => Self::classical(),
            Genre::Jazz => Self::jazz(),
        }
    }

    /// Single-line variant: no chords and no overlapping notes.
    pub fn melody_only(mut self) -> Self {
        self.chord_probability = 0.0;
        self.articulation = self.articulation.min(0.9);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.palette.is_empty() || self.palette.iter().any(|&p| p > 11) {
            return Err("palette must be non-empty pitch classes 0..=11".into());
        }
        if self.beat_offsets.is_empty() || self.beat_offsets.iter().any(|&o| o >= self.beat_ms) {
            return Err("beat offsets must lie inside the beat".into());
        }
        if self.velocity_range.0 > self.velocity_range.1 || self.velocity_range.1 > 127 {
            return Err("bad velocity range".into());
        }
        if self.length_ms.0 == 0 || self.length_ms.0 > self.length_ms.1 {
            return Err("bad length range".into());
        }
        if !(0.0..=1.0).contains(&self.chord_probability) || !(0.0..=1.0).contains(&self.articulation) {
            return Err("probabilities and articulation must be in [0, 1]".into());
        }
        let in_range = |(lo, hi): (u8, u8)| (lo..=hi).any(|p| self.palette.contains(&(p % 12)));
        if !in_range(self.melody_range) || !in_range(self.chord_range) {
            return Err("pitch ranges contain no palette pitch".into());
        }
        Ok(())
    }

    fn pitches_in(&self, (lo, hi): (u8, u8)) -> Vec<u8> {
        (lo..=hi).filter(|p| self.palette.contains(&(p % 12))).collect()
    }
}

/// A phrase of eight beats: melody notes as (onset within phrase, pitch)
/// and chords as (beat, pitches).
#[derive(Debug, Clone)]
struct Motif {
    melody: Vec<(u32, u8)>,
    chords: Vec<(u32, Vec<u8>)>,
}

const PHRASE_BEATS: u32 = 8;

fn make_motif(spec: &SyntheticGenreSpec, rng: &mut ChaCha8Rng) -> Motif {
    let melody_pitches = spec.pitches_in(spec.melody_range);
    let chord_pitches = spec.pitches_in(spec.chord_range);
    let mut melody = Vec::new();
    let mut idx = rng.random_range(0..melody_pitches.len());
    for beat in 0..PHRASE_BEATS {
        for &off in &spec.beat_offsets {
            // Skip some slots so rhythms vary between motifs.
            if off != 0 && rng.random_bool(0.35) {
                continue;
            }
            let step: i64 = rng.random_range(-2..=2);
            idx = (idx as i64 + step).clamp(0, melody_pitches.len() as i64 - 1) as usize;
            melody.push((beat * spec.beat_ms + off, melody_pitches[idx]));
        }
    }
    let mut chords = Vec::new();
    for beat in (0..PHRASE_BEATS).step_by(2) {
        if rng.random_bool(spec.chord_probability) {
            let root = rng.random_range(0..chord_pitches.len().saturating_sub(4).max(1));
            let size = rng.random_range(2..=3usize);
            let notes: Vec<u8> = (0..size).filter_map(|k| chord_pitches.get(root + 2 * k).copied()).collect();
            chords.push((beat, notes));
        }
    }
    Motif { melody, chords }
}

/// One synthetic piece: a form of repeated and new eight-beat phrases.
pub fn generate_piece(spec: &SyntheticGenreSpec, seed: u64, source_id: impl Into<String>) -> Piece {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = rng.random_range(spec.length_ms.0..=spec.length_ms.1);
    let phrase_ms = PHRASE_BEATS * spec.beat_ms;
    let mut motifs: Vec<Motif> = vec![make_motif(spec, &mut rng)];
    let mut events = Vec::new();
    let mut start = 0;
    while start + phrase_ms <= length.max(phrase_ms) {
        let motif = if rng.random_bool(0.6) || motifs.len() >= 4 {
            motifs.choose(&mut rng).expect("at least one motif").clone()
        } else {
            let m = make_motif(spec, &mut rng);
            motifs.push(m.clone());
            m
        };
        let base_velocity = rng.random_range(spec.velocity_range.0..=spec.velocity_range.1);
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0..=spec.timing_jitter_ms);
        let velocity = |rng: &mut ChaCha8Rng| {
            let v = i32::from(base_velocity) + rng.random_range(-8..=8);
            v.clamp(i32::from(spec.velocity_range.0), i32::from(spec.velocity_range.1)) as u8
        };
        for (k, &(t, pitch)) in motif.melody.iter().enumerate() {
            let next = motif.melody.get(k + 1).map_or(phrase_ms, |n| n.0);
            let onset = start + t + jitter(&mut rng);
            let gap = (start + next).saturating_sub(onset);
            let duration = ((f64::from(gap) * spec.articulation) as u32).max(20);
            events.push(NoteEvent::new(pitch, velocity(&mut rng), onset, duration));
        }
        for (beat, notes) in &motif.chords {
            let onset = start + beat * spec.beat_ms + jitter(&mut rng);
            let duration = ((f64::from(2 * spec.beat_ms) * spec.articulation) as u32).max(20);
            for &pitch in notes {
                events.push(NoteEvent::new(pitch, velocity(&mut rng), onset, duration));
            }
        }
        start += phrase_ms;
    }
    Piece::new(events, Some(spec.genre), source_id)
}

/// `pieces_per_genre` pieces from each spec, `a` first, deterministic per seed.
pub fn generate_synthetic(
    spec_a: &SyntheticGenreSpec,
    spec_b: &SyntheticGenreSpec,
    pieces_per_genre: usize,
    seed: u64,
) -> Result<Vec<Piece>, String> {
    spec_a.validate()?;
    spec_b.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * pieces_per_genre);
    for spec in [spec_a, spec_b] {
        for i in 0..pieces_per_genre {
            let id = format!("synthetic-{}-{i:03}", spec.genre);
            out.push(generate_piece(spec, rng.random(), id));
        }
    }
    Ok(out)
}
