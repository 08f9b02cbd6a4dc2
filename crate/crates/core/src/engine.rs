//! Iterative corrupt-and-refine generation: multi-pass improvisation,
//! structure-aware preservation, prompt continuation, infilling and
//! constrained harmonization.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::{corrupt, CorruptedSegment, CorruptionError, CorruptionKind};
use crate::midi::Genre;
use crate::model::{fit_encoder_input, ContextSpec, LogitConstraint, ModelError, RefineOptions, Refiner};
use crate::tokenizer::{Segment, Token, MAX_VELOCITY, ONSET_BASE, SEGMENT_MS, TIME_STEP_MS, VELOCITY_STEP, VOCAB_SIZE};

/// Largest context the schedule accepts on either side.
pub const MAX_CONTEXT: usize = 5;
/// Window after the first generated onset inside which the constrained
/// chord onsets must fall.
pub const CHORD_ONSET_WINDOW_MS: u32 = 50;
/// Longest continuation, in segments, that is expected to stay coherent.
pub const CONTINUATION_SOFT_LIMIT: usize = 4;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("the input has no segments")]
    EmptySequence,
    #[error("preservation mask has {mask} entries for {segments} segments")]
    MaskLength { mask: usize, segments: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("melody is not monophonic: notes at {first_ms} ms and {second_ms} ms start less than 50 ms apart")]
    Polyphonic { first_ms: u32, second_ms: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Corruption kind of a pass: fixed, or drawn per segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KindChoice {
    Fixed(CorruptionKind),
    Random,
}

impl fmt::Display for KindChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KindChoice::Fixed(k) => write!(f, "{k}"),
            KindChoice::Random => f.write_str("random"),
        }
    }
}

impl FromStr for KindChoice {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("random") {
            Ok(KindChoice::Random)
        } else {
            s.parse().map(KindChoice::Fixed)
        }
    }
}

impl TryFrom<String> for KindChoice {
    type Error = CorruptionError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<KindChoice> for String {
    fn from(k: KindChoice) -> String {
        k.to_string()
    }
}

impl From<CorruptionKind> for KindChoice {
    fn from(k: CorruptionKind) -> Self {
        KindChoice::Fixed(k)
    }
}

/// How the corrupt-or-keep decision is drawn within a pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrawMode {
    /// One uniform draw per segment compared against alpha.
    #[default]
    PerSegment,
    /// One uniform draw per pass; if below alpha every corruptible segment
    /// is refined, otherwise none.
    PerPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassSpec {
    pub kind: KindChoice,
    /// Probability of corrupting a corruptible segment.
    pub alpha: f64,
    pub left: usize,
    pub right: usize,
    pub target_genre: Genre,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    1.0
}

/// An ordered list of passes, loadable from JSON or TOML:
///
/// ```toml
/// draw = "per-segment"
/// [[passes]]
/// kind = "whole-mask"
/// alpha = 1.0
/// left = 2
/// right = 2
/// target_genre = "jazz"
/// temperature = 1.0
/// seed = 7
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSchedule {
    pub passes: Vec<PassSpec>,
    #[serde(default)]
    pub draw: DrawMode,
}

impl PassSchedule {
    /// `passes` identical passes whose seeds count up from `seed`.
    pub fn repeated(template: PassSpec, passes: usize) -> Self {
        let passes = (0..passes as u64).map(|q| PassSpec { seed: template.seed.wrapping_add(q), ..template }).collect();
        Self { passes, draw: DrawMode::PerSegment }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.passes.is_empty() {
            return Err(EngineError::Schedule("at least one pass is required".into()));
        }
        for (q, p) in self.passes.iter().enumerate() {
            let bad = |m: String| Err(EngineError::Schedule(format!("pass {}: {m}", q + 1)));
            if !(0.0..=1.0).contains(&p.alpha) {
                return bad(format!("alpha {} is outside [0, 1]", p.alpha));
            }
            if !(1..=MAX_CONTEXT).contains(&p.left) || !(1..=MAX_CONTEXT).contains(&p.right) {
                return bad(format!("context sizes must be 1..={MAX_CONTEXT}, got left {} right {}", p.left, p.right));
            }
            if !(p.temperature.is_finite() && p.temperature > 0.0) {
                return bad(format!("temperature {} must be positive", p.temperature));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, EngineError> {
        let s: Self = serde_json::from_str(s).map_err(|e| EngineError::Schedule(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_toml(s: &str) -> Result<Self, EngineError> {
        let s: Self = toml::from_str(s).map_err(|e| EngineError::Schedule(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a `.toml` file as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Schedule(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule is serializable")
    }
}

/// Segments exempt from corruption. `keep[i]` is true for segments that are
/// never touched, i.e. the complement of a 1-means-corruptible indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreservationMask {
    pub keep: Vec<bool>,
}

impl PreservationMask {
    /// Only the first and last segments kept.
    pub fn endpoints(n: usize) -> Self {
        let mut keep = vec![false; n];
        if let Some(first) = keep.first_mut() {
            *first = true;
        }
        if let Some(last) = keep.last_mut() {
            *last = true;
        }
        Self { keep }
    }

    /// Every segment corruptible, endpoints included.
    pub fn none(n: usize) -> Self {
        Self { keep: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn corruptible_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Indicator with 1 for corruptible segments.
    pub fn corruption_indicator(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| u8::from(!k)).collect()
    }
}

/// Duration-weighted pitch-class histogram of a segment, L2-normalized
/// (all zeros for a silent segment).
pub fn segment_chroma(s: &Segment) -> [f64; 12] {
    let mut c = [0.0; 12];
    for n in &s.notes {
        c[usize::from(n.pitch % 12)] += f64::from(n.duration);
    }
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        c.iter_mut().for_each(|x| *x /= norm);
    }
    c
}

/// Cosine self-similarity between segment chroma vectors. Two silent
/// segments are identical (1); silence against sound is 0.
pub fn segment_ssm(segments: &[Segment]) -> Vec<Vec<f64>> {
    let chroma: Vec<[f64; 12]> = segments.iter().map(segment_chroma).collect();
    let silent: Vec<bool> = chroma.iter().map(|c| c.iter().all(|&x| x == 0.0)).collect();
    (0..segments.len())
        .map(|i| {
            (0..segments.len())
                .map(|j| match (silent[i], silent[j]) {
                    (true, true) => 1.0,
                    (false, false) => chroma[i].iter().zip(&chroma[j]).map(|(a, b)| a * b).sum(),
                    _ => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Half-width of the checkerboard kernel (kernel width 4 segments).
const KERNEL_HALF: isize = 2;

/// Checkerboard-kernel novelty along the SSM diagonal. `novelty[i]` is high
/// when segment `i` starts something unlike what precedes it. Entries
/// outside the matrix count as zero.
pub fn novelty_curve(ssm: &[Vec<f64>]) -> Vec<f64> {
    let n = ssm.len() as isize;
    (0..n)
        .map(|i| {
            let mut v = 0.0;
            for a in -KERNEL_HALF..KERNEL_HALF {
                for b in -KERNEL_HALF..KERNEL_HALF {
                    let (r, c) = (i + a, i + b);
                    if r < 0 || c < 0 || r >= n || c >= n {
                        continue;
                    }
                    let sign = if (a < 0) == (b < 0) { 1.0 } else { -1.0 };
                    v += sign * ssm[r as usize][c as usize];
                }
            }
            v
        })
        .collect()
}

/// Keeps the first and last segments plus the `⌈ρ·N⌉` interior segments
/// with the highest novelty (earlier segments win ties). `ρ` is clamped
/// to `[0, 1]`.
pub fn select_preserved(segments: &[Segment], ratio: f64) -> PreservationMask {
    let n = segments.len();
    let mut mask = PreservationMask::endpoints(n);
    if n <= 2 {
        return mask;
    }
    let ratio = if ratio.is_nan() { 0.0 } else { ratio.clamp(0.0, 1.0) };
    let wanted = ((ratio * n as f64).ceil() as usize).min(n - 2);
    let novelty = novelty_curve(&segment_ssm(segments));
    let mut interior: Vec<usize> = (1..n - 1).collect();
    interior.sort_by(|&a, &b| novelty[b].total_cmp(&novelty[a]).then(a.cmp(&b)));
    for &i in &interior[..wanted] {
        mask.keep[i] = true;
    }
    mask
}

/// Everything a refiner needs to regenerate one segment.
#[derive(Debug, Clone, Copy)]
pub struct RefineJob<'a> {
    pub encoder_input: &'a [Token],
    /// The segment as it stands before corruption.
    pub current: &'a Segment,
    /// 1-based position of the segment.
    pub index: usize,
    pub options: RefineOptions,
}

/// Source of refined segments. [`Refiner`] samples from the network;
/// [`IdentityRefiner`] returns its input, which isolates the scheduling
/// logic from the model.
pub trait SegmentRefiner {
    fn max_encoder_len(&self) -> usize;

    fn check(&self) -> Result<(), ModelError> {
        Ok(())
    }

    fn refine_segment(&self, job: &RefineJob<'_>, constraint: Option<&mut dyn LogitConstraint>) -> Result<Segment, ModelError>;
}

impl SegmentRefiner for Refiner {
    fn max_encoder_len(&self) -> usize {
        self.config().max_encoder_len
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.config().vocab_size != VOCAB_SIZE {
            return Err(ModelError::VocabMismatch { found: format!("model vocabulary of {} tokens", self.config().vocab_size) });
        }
        Ok(())
    }

    fn refine_segment(&self, job: &RefineJob<'_>, constraint: Option<&mut dyn LogitConstraint>) -> Result<Segment, ModelError> {
        Ok(self.refine(job.encoder_input, job.index, job.options, constraint)?.segment)
    }
}

/// Echoes the uncorrupted segment.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl SegmentRefiner for IdentityRefiner {
    fn max_encoder_len(&self) -> usize {
        usize::MAX
    }

    fn refine_segment(&self, job: &RefineJob<'_>, _constraint: Option<&mut dyn LogitConstraint>) -> Result<Segment, ModelError> {
        Ok(job.current.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    /// Exempt by the preservation mask.
    Preserved,
    /// The corruption draw did not select the segment.
    Kept,
    Refined,
    /// Selected, but even without context the input exceeded the model.
    TooLong,
}

/// One decision of a generation job, written as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    /// 1-based pass number.
    pub pass: usize,
    /// 1-based segment index.
    pub index: usize,
    pub action: Action,
    pub kind: Option<CorruptionKind>,
    /// Corruption seed; the refinement seed is recorded separately.
    pub seed: Option<u64>,
    pub refine_seed: Option<u64>,
    pub left: usize,
    pub right: usize,
    pub genre: Genre,
    /// Uniform draw compared against alpha.
    pub draw: Option<f64>,
}

/// Segments after a number of passes, with the full decision log.
#[derive(Debug, Clone, PartialEq)]
pub struct PassState {
    pub segments: Vec<Segment>,
    pub pass_index: usize,
    pub log: Vec<ProvenanceRecord>,
}

impl PassState {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments, pass_index: 0, log: Vec::new() }
    }

    pub fn provenance_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("record is serializable"));
            out.push('\n');
        }
        out
    }

    pub fn refined_in_pass(&self, pass: usize) -> usize {
        self.log.iter().filter(|r| r.pass == pass && r.action == Action::Refined).count()
    }
}

/// Corrupts segment `index` of `segments` and refines it in place.
/// Returns the action taken and the context actually used.
#[allow(clippy::too_many_arguments)]
fn refine_at(
    refiner: &dyn SegmentRefiner,
    segments: &mut [Segment],
    index: usize,
    ctx: ContextSpec,
    kind: CorruptionKind,
    genre: Genre,
    seed: u64,
    options: RefineOptions,
    constraint: Option<&mut dyn LogitConstraint>,
) -> Result<(Action, ContextSpec), EngineError> {
    let current = segments[index - 1].clone();
    let frame: CorruptedSegment = corrupt(&current, kind, genre, seed);
    let Some((input, used)) = fit_encoder_input(segments, index, ctx, genre, &frame, refiner.max_encoder_len()) else {
        log::warn!("segment {index} does not fit the model even without context; keeping it");
        return Ok((Action::TooLong, ContextSpec { left: 0, right: 0 }));
    };
    let job = RefineJob { encoder_input: &input, current: &current, index, options };
    let mut out = refiner.refine_segment(&job, constraint)?;
    out.index = index;
    segments[index - 1] = out;
    Ok((Action::Refined, used))
}

/// Runs the schedule over `state`, continuing its pass numbering. Within a
/// pass, segments are visited left to right and each refinement sees the
/// already-updated left neighbours.
pub fn improvise_state(
    mut state: PassState,
    refiner: &dyn SegmentRefiner,
    schedule: &PassSchedule,
    mask: &PreservationMask,
) -> Result<PassState, EngineError> {
    schedule.validate()?;
    refiner.check()?;
    let n = state.segments.len();
    if n == 0 {
        return Err(EngineError::EmptySequence);
    }
    if mask.len() != n {
        return Err(EngineError::MaskLength { mask: mask.len(), segments: n });
    }
    for spec in &schedule.passes {
        state.pass_index += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let pass_draw: f64 = rng.random();
        for i in 1..=n {
            // Draws happen for every segment so the random stream does not
            // depend on the mask.
            let draw = match schedule.draw {
                DrawMode::PerSegment => rng.random(),
                DrawMode::PerPass => pass_draw,
            };
            let kind = match spec.kind {
                KindChoice::Fixed(k) => k,
                KindChoice::Random => *CorruptionKind::ALL.choose(&mut rng).expect("kinds are non-empty"),
            };
            let seed: u64 = rng.random();
            let refine_seed: u64 = rng.random();
            let mut record = ProvenanceRecord {
                pass: state.pass_index,
                index: i,
                action: Action::Kept,
                kind: None,
                seed: None,
                refine_seed: None,
                left: 0,
                right: 0,
                genre: spec.target_genre,
                draw: Some(draw),
            };
            if mask.keep[i - 1] {
                record.action = Action::Preserved;
            } else if draw < spec.alpha {
                let options = RefineOptions { temperature: spec.temperature, seed: refine_seed, grammar: true };
                let ctx = ContextSpec { left: spec.left, right: spec.right };
                let (action, used) =
                    refine_at(refiner, &mut state.segments, i, ctx, kind, spec.target_genre, seed, options, None)?;
                record = ProvenanceRecord {
                    action,
                    kind: Some(kind),
                    seed: Some(seed),
                    refine_seed: Some(refine_seed),
                    left: used.left,
                    right: used.right,
                    ..record
                };
            }
            state.log.push(record);
        }
    }
    Ok(state)
}

/// Multi-pass improvisation starting from `segments`.
pub fn improvise(
    segments: &[Segment],
    refiner: &dyn SegmentRefiner,
    schedule: &PassSchedule,
    mask: &PreservationMask,
) -> Result<PassState, EngineError> {
    improvise_state(PassState::new(segments.to_vec()), refiner, schedule, mask)
}

/// Settings shared by continuation, infilling and harmonization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub genre: Genre,
    pub left: usize,
    pub right: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl GenerationOptions {
    pub fn new(genre: Genre) -> Self {
        Self { genre, left: 2, right: 2, temperature: 1.0, seed: 0 }
    }
}

fn renumber(segments: &mut [Segment]) {
    for (i, s) in segments.iter_mut().enumerate() {
        s.index = i + 1;
    }
}

/// Generates the whole-mask segment at `index` from left context only (or
/// both sides when `bidirectional`) and records it as pass 1.
fn generate_at(
    state: &mut PassState,
    refiner: &dyn SegmentRefiner,
    index: usize,
    bidirectional: bool,
    opts: &GenerationOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(), EngineError> {
    let seed: u64 = rng.random();
    let refine_seed: u64 = rng.random();
    let ctx = ContextSpec { left: opts.left, right: if bidirectional { opts.right } else { 0 } };
    let options = RefineOptions { temperature: opts.temperature, seed: refine_seed, grammar: true };
    let kind = CorruptionKind::WholeMask;
    let (action, used) = refine_at(refiner, &mut state.segments, index, ctx, kind, opts.genre, seed, options, None)?;
    state.log.push(ProvenanceRecord {
        pass: 1,
        index,
        action,
        kind: Some(kind),
        seed: Some(seed),
        refine_seed: Some(refine_seed),
        left: used.left,
        right: used.right,
        genre: opts.genre,
        draw: None,
    });
    Ok(())
}

fn check_options(opts: &GenerationOptions) -> Result<(), EngineError> {
    if !(opts.temperature.is_finite() && opts.temperature > 0.0) {
        return Err(ModelError::BadTemperature(opts.temperature).into());
    }
    if opts.left == 0 || opts.left > MAX_CONTEXT || opts.right > MAX_CONTEXT {
        return Err(EngineError::BadRequest(format!("context sizes must be within 1..={MAX_CONTEXT}")));
    }
    Ok(())
}

/// Appends `n` segments after the prompt, each generated from a whole-mask
/// frame with left context only.
pub fn continue_prompt(
    prompt: &[Segment],
    refiner: &dyn SegmentRefiner,
    n: usize,
    opts: &GenerationOptions,
) -> Result<PassState, EngineError> {
    check_options(opts)?;
    refiner.check()?;
    if n > CONTINUATION_SOFT_LIMIT {
        log::warn!("continuing by {n} segments; coherence degrades beyond {CONTINUATION_SOFT_LIMIT}");
    }
    let mut state = PassState::new(prompt.to_vec());
    renumber(&mut state.segments);
    if n == 0 {
        return Ok(state);
    }
    if prompt.is_empty() {
        return Err(EngineError::EmptySequence);
    }
    state.pass_index = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..n {
        let index = state.segments.len() + 1;
        state.segments.push(Segment::empty(index));
        generate_at(&mut state, refiner, index, false, opts, &mut rng)?;
    }
    Ok(state)
}

/// Fills `n` segments between two contexts: the first `n - 1` continue the
/// left side, the last one sees both sides.
pub fn infill(
    left: &[Segment],
    right: &[Segment],
    refiner: &dyn SegmentRefiner,
    n: usize,
    opts: &GenerationOptions,
) -> Result<PassState, EngineError> {
    check_options(opts)?;
    refiner.check()?;
    if left.is_empty() || right.is_empty() {
        return Err(EngineError::BadRequest("infilling needs non-empty left and right contexts".into()));
    }
    if n == 0 {
        return Err(EngineError::BadRequest("infilling needs at least one gap segment".into()));
    }
    let mut segments: Vec<Segment> = left.to_vec();
    segments.extend((0..n).map(|_| Segment::empty(0)));
    segments.extend_from_slice(right);
    renumber(&mut segments);
    let mut state = PassState::new(segments);
    state.pass_index = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for k in 0..n {
        let index = left.len() + k + 1;
        generate_at(&mut state, refiner, index, k + 1 == n, opts, &mut rng)?;
    }
    Ok(state)
}

/// Forces the first `budget` generated onsets into a chord: after the first
/// onset `m`, onset ids outside `[m, m + 50 ms]` are masked until the
/// budget is spent, and End is masked until then. Within the chord a pitch
/// may not repeat at the same onset, since such a note would merge with
/// the earlier one. Later tokens are free.
#[derive(Debug, Clone)]
pub struct HarmonyConstraint {
    budget: usize,
    onsets: usize,
    notes: usize,
    first_bin: Option<usize>,
    current: Option<u32>,
    pitches_at_current: Vec<u8>,
}

impl HarmonyConstraint {
    pub fn new(budget: usize) -> Self {
        Self { budget, onsets: 0, notes: 0, first_bin: None, current: None, pitches_at_current: Vec::new() }
    }
}

impl LogitConstraint for HarmonyConstraint {
    fn apply(&self, logits: &mut [f32]) {
        if self.notes < self.budget {
            for &pitch in &self.pitches_at_current {
                for velocity in (0..=MAX_VELOCITY).step_by(usize::from(VELOCITY_STEP)) {
                    logits[Token::PitchVelocity { pitch, velocity }.id() as usize] = f32::NEG_INFINITY;
                }
            }
        }
        if self.onsets >= self.budget {
            return;
        }
        logits[Token::End.id() as usize] = f32::NEG_INFINITY;
        if let Some(first) = self.first_bin {
            let window = (CHORD_ONSET_WINDOW_MS / TIME_STEP_MS) as usize;
            let base = ONSET_BASE as usize;
            for bin in 0..(SEGMENT_MS / TIME_STEP_MS) as usize {
                if bin < first || bin > first + window {
                    logits[base + bin] = f32::NEG_INFINITY;
                }
            }
        }
    }

    fn observe(&mut self, id: usize) {
        match Token::from_id(id as u32) {
            Some(Token::Onset(ms)) => {
                self.onsets += 1;
                if self.first_bin.is_none() {
                    self.first_bin = Some((ms / TIME_STEP_MS) as usize);
                }
                if self.current != Some(ms) {
                    self.current = Some(ms);
                    self.pitches_at_current.clear();
                }
            }
            Some(Token::PitchVelocity { pitch, .. }) => {
                self.notes += 1;
                self.pitches_at_current.push(pitch);
            }
            _ => {}
        }
    }
}

/// Result of checking that each segment opens with a chord.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub budget: usize,
    pub segments: usize,
    pub satisfied: usize,
    /// 1-based indices of failing segments.
    pub violations: Vec<usize>,
}

impl ConstraintReport {
    pub fn rate(&self) -> f64 {
        if self.segments == 0 {
            1.0
        } else {
            self.satisfied as f64 / self.segments as f64
        }
    }
}

/// A segment satisfies the constraint when it has at least `budget` notes
/// and its first `budget` onsets lie within 50 ms of its first onset.
pub fn check_chord_onsets(segments: &[Segment], budget: usize) -> ConstraintReport {
    let mut violations = Vec::new();
    for s in segments {
        let mut onsets: Vec<u32> = s.notes.iter().map(|n| n.onset).collect();
        onsets.sort_unstable();
        let ok = onsets.len() >= budget
            && onsets.iter().take(budget).all(|&o| o - onsets[0] <= CHORD_ONSET_WINDOW_MS);
        if !ok {
            violations.push(s.index);
        }
    }
    ConstraintReport { budget, segments: segments.len(), satisfied: segments.len() - violations.len(), violations }
}

/// Errors with the first pair of notes that start less than 50 ms apart.
pub fn check_monophonic(segments: &[Segment]) -> Result<(), EngineError> {
    let mut onsets: Vec<u32> = segments
        .iter()
        .flat_map(|s| s.notes.iter().map(move |n| (s.index as u32 - 1) * SEGMENT_MS + n.onset))
        .collect();
    onsets.sort_unstable();
    for w in onsets.windows(2) {
        if w[1] - w[0] < CHORD_ONSET_WINDOW_MS {
            return Err(EngineError::Polyphonic { first_ms: w[0], second_ms: w[1] });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Harmonization {
    pub state: PassState,
    /// Chord-onset check of the constrained first pass.
    pub report: ConstraintReport,
    /// Segments right after the constrained pass.
    pub first_pass: Vec<Segment>,
}

/// Harmonizes a monophonic melody. Pass 1 refines every segment from its
/// skyline with the chord-onset constraint (when `budget > 0`); then
/// `extra_passes` unconstrained skyline passes follow.
pub fn harmonize(
    melody: &[Segment],
    refiner: &dyn SegmentRefiner,
    budget: usize,
    extra_passes: usize,
    opts: &GenerationOptions,
) -> Result<Harmonization, EngineError> {
    check_options(opts)?;
    refiner.check()?;
    if melody.is_empty() {
        return Err(EngineError::EmptySequence);
    }
    check_monophonic(melody)?;
    let mut state = PassState::new(melody.to_vec());
    renumber(&mut state.segments);
    let kind = CorruptionKind::Skyline;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut first_pass = Vec::new();
    for pass in 1..=1 + extra_passes {
        state.pass_index = pass;
        for i in 1..=state.segments.len() {
            let seed: u64 = rng.random();
            let refine_seed: u64 = rng.random();
            let options = RefineOptions { temperature: opts.temperature, seed: refine_seed, grammar: true };
            let ctx = ContextSpec { left: opts.left, right: opts.right };
            let mut constraint = HarmonyConstraint::new(budget);
            let c: Option<&mut dyn LogitConstraint> = if pass == 1 && budget > 0 { Some(&mut constraint) } else { None };
            let (action, used) = refine_at(refiner, &mut state.segments, i, ctx, kind, opts.genre, seed, options, c)?;
            state.log.push(ProvenanceRecord {
                pass,
                index: i,
                action,
                kind: Some(kind),
                seed: Some(seed),
                refine_seed: Some(refine_seed),
                left: used.left,
                right: used.right,
                genre: opts.genre,
                draw: None,
            });
        }
        if pass == 1 {
            first_pass = state.segments.clone();
        }
    }
    let report = check_chord_onsets(&first_pass, budget);
    Ok(Harmonization { state, report, first_pass })
}
