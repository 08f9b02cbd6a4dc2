//! Training loops for the refiner and the genre classifier.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{classification_windows, ClassifierExample, GenreClassifier};
use super::refiner::{make_training_example, ContextSpec, Refiner, TrainingExample};
use super::{LossStats, ModelError, Train};
use crate::corruption::CorruptionKind;
use crate::midi::Genre;
use crate::nn::{AdamW, AdamWConfig, LrSchedule};
use crate::tokenizer::Segment;

/// A tokenized piece with its genre label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPiece {
    pub segments: Vec<Segment>,
    pub genre: Genre,
}

pub type LabeledPiece = TrainingPiece;

/// Seed for the data and dropout stream of one optimizer step. Making it a
/// function of `(seed, step)` alone means a resumed run replays exactly.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Context sizes are drawn uniformly from `1..=max_context` per side.
    pub max_context: usize,
    pub kinds: Vec<CorruptionKind>,
    /// Probability that an example's context is taken from a random piece
    /// of another genre while the genre token stays that of the target.
    /// Zero keeps every example inside one piece.
    #[serde(default)]
    pub cross_genre_context: f64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            max_context: 5,
            kinds: CorruptionKind::ALL.to_vec(),
            cross_genre_context: 0.0,
        }
    }
}

impl RefinerTrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak: self.learning_rate, warmup_ratio: self.warmup_ratio, total_steps: self.steps }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..Default::default() }
    }
}

/// Surrounds segment `index` of `piece` with context cut from a random
/// non-empty piece of another genre. Returns the spliced list and the
/// target's new 1-based position, or `None` if no such piece exists.
fn splice_foreign_context(
    corpus: &[TrainingPiece],
    piece: &TrainingPiece,
    index: usize,
    ctx: ContextSpec,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Segment>, usize)> {
    let donors: Vec<&TrainingPiece> =
        corpus.iter().filter(|p| p.genre != piece.genre && !p.segments.is_empty()).collect();
    if donors.is_empty() {
        return None;
    }
    let donor = donors[rng.random_range(0..donors.len())];
    let at = rng.random_range(0..donor.segments.len());
    let left = &donor.segments[at.saturating_sub(ctx.left)..at];
    let right = donor.segments.iter().skip(at + 1).take(ctx.right);
    let mut out: Vec<Segment> = left.to_vec();
    out.push(piece.segments[index - 1].clone());
    out.extend(right.cloned());
    for (i, s) in out.iter_mut().enumerate() {
        s.index = i + 1;
    }
    Some((out, left.len() + 1))
}

/// Owns the refiner, its optimizer state and the loss curve.
#[derive(Debug, Clone)]
pub struct RefinerTrainer {
    pub refiner: Refiner,
    pub optimizer: AdamW<f32>,
    pub config: RefinerTrainConfig,
    /// `(step, mean batch loss)` for every completed step.
    pub losses: Vec<(usize, f64)>,
}

impl RefinerTrainer {
    pub fn new(refiner: Refiner, config: RefinerTrainConfig) -> Self {
        let optimizer = AdamW::new(&refiner.net.params, config.adamw());
        Self { refiner, optimizer, config, losses: Vec::new() }
    }

    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    fn check_corpus(&self, corpus: &[TrainingPiece]) -> Result<usize, ModelError> {
        let total: usize = corpus.iter().map(|p| p.segments.len()).sum();
        if total == 0 {
            return Err(ModelError::Corpus("no segments".into()));
        }
        if total < self.config.batch_size {
            return Err(ModelError::Corpus(format!("{total} segments is smaller than one batch of {}", self.config.batch_size)));
        }
        if self.config.kinds.is_empty() {
            return Err(ModelError::Corpus("no corruption kinds enabled".into()));
        }
        Ok(total)
    }

    /// Draws one example whose encoder input and target fit the model,
    /// shrinking context before giving up on a segment.
    fn sample_example(&self, corpus: &[TrainingPiece], total: usize, rng: &mut ChaCha8Rng) -> Result<TrainingExample, ModelError> {
        let cfg = self.refiner.config();
        for _ in 0..1000 {
            let mut k = rng.random_range(0..total);
            let piece = corpus
                .iter()
                .find(|p| {
                    if k < p.segments.len() {
                        true
                    } else {
                        k -= p.segments.len();
                        false
                    }
                })
                .expect("k < total");
            let mut index = k + 1;
            let max_ctx = self.config.max_context.max(1);
            let mut ctx = ContextSpec { left: rng.random_range(1..=max_ctx), right: rng.random_range(1..=max_ctx) };
            let kind = self.config.kinds[rng.random_range(0..self.config.kinds.len())];
            let seed: u64 = rng.random();
            let mut segments: &[Segment] = &piece.segments;
            let spliced;
            if self.config.cross_genre_context > 0.0 && rng.random_bool(self.config.cross_genre_context.min(1.0)) {
                if let Some((s, i)) = splice_foreign_context(corpus, piece, index, ctx, rng) {
                    spliced = s;
                    segments = &spliced;
                    index = i;
                }
            }
            loop {
                let ex = make_training_example(segments, index, ctx, kind, piece.genre, seed)?;
                if ex.decoder_target.len() > cfg.max_decoder_len {
                    break;
                }
                if ex.encoder_input.len() <= cfg.max_encoder_len {
                    return Ok(ex);
                }
                if ctx.left == 0 && ctx.right == 0 {
                    break;
                }
                if ctx.left >= ctx.right {
                    ctx.left -= 1;
                } else {
                    ctx.right -= 1;
                }
            }
        }
        Err(ModelError::Corpus("no segment fits the model's length limits".into()))
    }

    /// One optimizer step on the given batch.
    pub fn step_on(&mut self, batch: &[TrainingExample], rng: &mut ChaCha8Rng) -> Result<LossStats, ModelError> {
        let net = &self.refiner.net;
        let mut grads = net.params.zero_grads();
        let mut total = LossStats::default();
        for ex in batch {
            let mut tr = Train { dropout: net.config.dropout, rng: Some(&mut *rng) };
            let s = net.loss(&ex.encoder_ids(), &ex.decoder_input(), &ex.target_ids(), &mut tr, Some(&mut grads));
            total.loss += s.loss;
            total.correct += s.correct;
            total.count += s.count;
        }
        total.loss /= batch.len() as f64;
        grads.scale(1.0 / batch.len() as f32);
        let lr = self.config.schedule().at(self.optimizer.step);
        self.optimizer.update(&mut self.refiner.net.params, &mut grads, lr);
        if !self.refiner.net.params.all_finite() {
            return Err(ModelError::Corpus(format!("parameters diverged at step {}", self.optimizer.step)));
        }
        self.losses.push((self.optimizer.step, total.loss));
        Ok(total)
    }

    /// Samples a batch with the step's own RNG and applies one update.
    pub fn train_step(&mut self, corpus: &[TrainingPiece]) -> Result<LossStats, ModelError> {
        let total = self.check_corpus(corpus)?;
        let mut rng = step_rng(self.config.seed, self.optimizer.step);
        let batch = (0..self.config.batch_size)
            .map(|_| self.sample_example(corpus, total, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        self.step_on(&batch, &mut rng)
    }

    /// Trains until `config.steps` updates have been applied, calling
    /// `on_step` after each one.
    pub fn train(&mut self, corpus: &[TrainingPiece], mut on_step: impl FnMut(&Self)) -> Result<(), ModelError> {
        self.check_corpus(corpus)?;
        while self.optimizer.step < self.config.steps {
            self.train_step(corpus)?;
            on_step(self);
        }
        Ok(())
    }

    /// Loss curve as CSV with a `step,loss` header.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.losses {
            out.push_str(&format!("{s},{l:.6}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 8, learning_rate: 1e-3, warmup_ratio: 0.1, weight_decay: 0.01, clip_norm: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub losses: Vec<(usize, f64)>,
    /// Piece-level accuracy on the training corpus after training.
    pub train_accuracy: f64,
}

/// Binary cross-entropy training on randomly drawn three-segment windows.
pub fn train_classifier(
    clf: &mut GenreClassifier<f32>,
    corpus: &[LabeledPiece],
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierReport, ModelError> {
    let usable: Vec<&LabeledPiece> = corpus.iter().filter(|p| !p.segments.is_empty()).collect();
    let jazz = usable.iter().filter(|p| p.genre == Genre::Jazz).count();
    if jazz == 0 || jazz == usable.len() {
        return Err(ModelError::Corpus("classifier training needs pieces of both genres".into()));
    }
    let schedule = LrSchedule { peak: cfg.learning_rate, warmup_ratio: cfg.warmup_ratio, total_steps: cfg.steps };
    let mut opt = AdamW::new(
        &clf.params,
        AdamWConfig { weight_decay: cfg.weight_decay, clip_norm: cfg.clip_norm, ..Default::default() },
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let mut grads = clf.params.zero_grads();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let piece = usable[rng.random_range(0..usable.len())];
            let windows = classification_windows(piece.segments.len());
            let w = windows[rng.random_range(0..windows.len())].clone();
            let ex = ClassifierExample { ids: clf.window_ids(&piece.segments[w]), jazz: piece.genre == Genre::Jazz };
            let mut tr = Train { dropout: clf.config.dropout, rng: Some(&mut rng) };
            total += clf.loss(&ex, &mut tr, Some(&mut grads)).0;
        }
        grads.scale(1.0 / cfg.batch_size as f32);
        opt.update(&mut clf.params, &mut grads, schedule.at(step));
        losses.push((step + 1, total / cfg.batch_size as f64));
    }
    let train_accuracy = evaluate_classifier(clf, corpus)?;
    Ok(ClassifierReport { losses, train_accuracy })
}

/// Fraction of pieces whose mean window probability lands on the correct
/// side of 0.5 (jazz if at least 0.5).
pub fn evaluate_classifier(clf: &GenreClassifier<f32>, pieces: &[LabeledPiece]) -> Result<f64, ModelError> {
    if pieces.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let mut correct = 0;
    for p in pieces {
        let predicted_jazz = clf.classify_genre(&p.segments)? >= 0.5;
        correct += usize::from(predicted_jazz == (p.genre == Genre::Jazz));
    }
    Ok(correct as f64 / pieces.len() as f64)
}
