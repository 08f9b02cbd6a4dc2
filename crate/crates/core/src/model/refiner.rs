//! Encoder input construction, training examples, and sampling-based
//! refinement with the encoder-decoder network.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{end_id, sample_index, softmax_with_temperature, GrammarConstraint, LogitConstraint};
use super::{LossStats, ModelConfig, ModelError, Seq2Seq, Train};
use crate::corruption::{corrupt, CorruptedSegment, CorruptionKind};
use crate::midi::Genre;
use crate::tokenizer::{decode_lossy, Segment, Token};

/// Numbers of context segments to the left and right of the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub left: usize,
    pub right: usize,
}

/// Encoder input layout:
/// `<genre> <kind> left_1 <T> .. left_L <T> frame <T> right_1 .. <T> right_R`.
/// The conditioning tokens come first; context stops at sequence edges.
pub fn build_encoder_input(
    segments: &[Segment],
    index: usize,
    ctx: ContextSpec,
    genre: Genre,
    frame: &CorruptedSegment,
) -> Vec<Token> {
    let pos = index - 1;
    let mut out = vec![Token::Genre(genre), Token::Corruption(frame.kind)];
    for s in &segments[pos.saturating_sub(ctx.left)..pos] {
        out.extend(s.tokens());
        out.push(Token::SegmentSep);
    }
    out.extend_from_slice(&frame.tokens);
    for s in segments.iter().skip(pos + 1).take(ctx.right) {
        out.push(Token::SegmentSep);
        out.extend(s.tokens());
    }
    out
}

/// Like [`build_encoder_input`], shrinking the wider context side first
/// until the input fits in `max_len` tokens. `None` if even the bare frame
/// is too long.
pub fn fit_encoder_input(
    segments: &[Segment],
    index: usize,
    mut ctx: ContextSpec,
    genre: Genre,
    frame: &CorruptedSegment,
    max_len: usize,
) -> Option<(Vec<Token>, ContextSpec)> {
    let pos = index - 1;
    ctx.left = ctx.left.min(pos);
    ctx.right = ctx.right.min(segments.len() - index);
    loop {
        let input = build_encoder_input(segments, index, ctx, genre, frame);
        if input.len() <= max_len {
            return Some((input, ctx));
        }
        if ctx.left == 0 && ctx.right == 0 {
            return None;
        }
        if ctx.left >= ctx.right {
            ctx.left -= 1;
        } else {
            ctx.right -= 1;
        }
    }
}

/// One supervised pair: corrupted context in, clean segment out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub encoder_input: Vec<u32>,
    /// Clean segment tokens followed by End.
    pub decoder_target: Vec<u32>,
    pub kind: CorruptionKind,
    pub context: ContextSpec,
    pub right_dropped: bool,
}

impl TrainingExample {
    /// `[Start] + target[..-1]`.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(Token::Start.id())
            .chain(self.decoder_target[..self.decoder_target.len() - 1].iter().copied())
            .map(|id| id as usize)
            .collect()
    }

    pub fn encoder_ids(&self) -> Vec<usize> {
        self.encoder_input.iter().map(|&id| id as usize).collect()
    }

    pub fn target_ids(&self) -> Vec<usize> {
        self.decoder_target.iter().map(|&id| id as usize).collect()
    }
}

/// Corrupts segment `index` (1-based) and assembles the encoder input with
/// up to `left`/`right` context segments. For whole-mask corruption the right
/// context is dropped on a fair coin flip.
pub fn make_training_example(
    segments: &[Segment],
    index: usize,
    ctx: ContextSpec,
    kind: CorruptionKind,
    genre: Genre,
    seed: u64,
) -> Result<TrainingExample, ModelError> {
    if index == 0 || index > segments.len() {
        return Err(ModelError::SegmentOutOfRange { index, count: segments.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corruption_seed: u64 = rng.random();
    let right_dropped = kind == CorruptionKind::WholeMask && rng.random_bool(0.5);
    let ctx = ContextSpec { left: ctx.left, right: if right_dropped { 0 } else { ctx.right } };
    let target = &segments[index - 1];
    let frame = corrupt(target, kind, genre, corruption_seed);
    let encoder_input = build_encoder_input(segments, index, ctx, genre, &frame).iter().map(|t| t.id()).collect();
    let decoder_target = target.tokens().iter().chain([&Token::End]).map(|t| t.id()).collect();
    Ok(TrainingExample { encoder_input, decoder_target, kind, context: ctx, right_dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub temperature: f64,
    pub seed: u64,
    /// Restrict sampling to well-formed segment grammar.
    pub grammar: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { temperature: 1.0, seed: 0, grammar: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    /// Generated tokens, End excluded.
    pub tokens: Vec<Token>,
    pub segment: Segment,
    /// Tokens dropped while decoding the output into notes.
    pub repairs: usize,
    /// True if generation stopped on End rather than the length limit.
    pub ended: bool,
}

/// The trained refinement network.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub net: Seq2Seq<f32>,
}

impl Refiner {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        Self { net: Seq2Seq::new(config, seed) }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Teacher-forced loss and token accuracy with dropout off.
    pub fn evaluate(&self, ex: &TrainingExample) -> LossStats {
        let mut tr = Train::<ChaCha8Rng> { dropout: 0.0, rng: None };
        self.net.loss(&ex.encoder_ids(), &ex.decoder_input(), &ex.target_ids(), &mut tr, None)
    }

    /// Samples a refined segment autoregressively from `softmax(z / tau)`.
    /// `constraint` (if any) masks logits after the grammar constraint.
    pub fn refine(
        &self,
        encoder_input: &[Token],
        index: usize,
        opts: RefineOptions,
        mut constraint: Option<&mut dyn LogitConstraint>,
    ) -> Result<RefineOutput, ModelError> {
        self.net.check_lengths(encoder_input.len(), 0)?;
        softmax_with_temperature(&[0.0], opts.temperature)?;
        let ids: Vec<usize> = encoder_input.iter().map(|t| t.id() as usize).collect();
        let mut state = self.net.start_decode(&ids);
        let budget = self.net.config.max_decoder_len;
        let mut grammar = GrammarConstraint::new(budget);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut prev = Token::Start.id() as usize;
        let mut tokens = Vec::new();
        let mut ended = false;
        for _ in 0..budget {
            let mut logits = self.net.decode_step(&mut state, prev).to_vec();
            if opts.grammar {
                grammar.apply(&mut logits);
            }
            if let Some(c) = constraint.as_deref() {
                c.apply(&mut logits);
            }
            let probs = softmax_with_temperature(&logits, opts.temperature)?;
            let u: f64 = rng.random();
            let Some(next) = sample_index(&probs, u) else {
                // Every id masked: nothing can be emitted, close the segment.
                ended = true;
                break;
            };
            if next == end_id() {
                ended = true;
                break;
            }
            grammar.observe(next);
            if let Some(c) = constraint.as_deref_mut() {
                c.observe(next);
            }
            tokens.push(Token::from_id(next as u32).expect("sampled id is in the vocabulary"));
            prev = next;
        }
        let decoded = decode_lossy(&tokens);
        let repairs = decoded.repairs + decoded.segments.len().saturating_sub(1);
        let mut segment = decoded.segments.into_iter().next().unwrap_or_else(|| Segment::empty(index));
        segment.index = index;
        Ok(RefineOutput { tokens, segment, repairs, ended })
    }
}
