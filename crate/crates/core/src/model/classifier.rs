//! Encoder-only genre classifier over windows of three segments.

use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderStack, ModelConfig, ModelError, Train};
use crate::midi::Genre;
use crate::nn::{Embedding, Grads, Linear, ParamStore, Real};
use crate::tokenizer::{Segment, Token};

/// Segments per classification window.
pub const WINDOW_SEGMENTS: usize = 3;

/// Window ranges over `n` segments: stride one over full windows, or a
/// single window of everything when `n` is below the window size.
pub fn classification_windows(n: usize) -> Vec<Range<usize>> {
    if n < WINDOW_SEGMENTS {
        vec![0..n]
    } else {
        (0..=n - WINDOW_SEGMENTS).map(|i| i..i + WINDOW_SEGMENTS).collect()
    }
}

/// A window of token ids and its label (true = jazz).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierExample {
    pub ids: Vec<usize>,
    pub jazz: bool,
}

#[derive(Debug, Clone)]
pub struct GenreClassifier<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    embed: Embedding,
    encoder: EncoderStack,
    head: Linear,
}

impl<T: Real> GenreClassifier<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embed = Embedding::new(&mut params, "embed", config.vocab_size, config.d_model, config.init_std, &mut rng);
        let encoder = EncoderStack::new(&mut params, "enc", &config, &mut rng);
        let head = Linear::new(&mut params, "head", config.d_model, 1, config.init_std, &mut rng);
        Self { config, params, embed, encoder, head }
    }

    /// Segments joined by the segment separator, truncated to the window.
    pub fn window_ids(&self, window: &[Segment]) -> Vec<usize> {
        let mut ids = Vec::new();
        for (i, s) in window.iter().enumerate() {
            if i > 0 {
                ids.push(Token::SegmentSep.id() as usize);
            }
            ids.extend(s.tokens().iter().map(|t| t.id() as usize));
        }
        if ids.is_empty() {
            // An all-silent window still needs one position to attend over.
            ids.push(Token::SegmentSep.id() as usize);
        }
        ids.truncate(self.config.max_encoder_len);
        ids
    }

    fn logit<R: Rng>(&self, ids: &[usize], tr: &mut Train<R>) -> (T, Array2<T>, super::network::EncoderCache<T>) {
        let (memory, cache) = self.encoder.forward(&self.params, &self.embed, ids, tr);
        let pooled = memory.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let z = self.head.forward(&self.params, &pooled)[[0, 0]];
        (z, pooled, cache)
    }

    /// Binary cross-entropy on one window; accumulates gradients when given.
    /// Returns `(loss, p_jazz)`.
    pub fn loss<R: Rng>(&self, ex: &ClassifierExample, tr: &mut Train<R>, grads: Option<&mut Grads<T>>) -> (f64, f64) {
        let (z, pooled, cache) = self.logit(&ex.ids, tr);
        let z = z.to_f64().expect("finite");
        let p = sigmoid(z);
        let y = if ex.jazz { 1.0 } else { 0.0 };
        // log(1 + e^-|z|) formulation keeps large logits finite.
        let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        if let Some(g) = grads {
            let dz = Array2::from_elem((1, 1), T::of(p - y));
            let dpooled = self.head.backward(&self.params, &pooled, &dz, g);
            let n = ex.ids.len();
            let dmem = Array2::from_shape_fn((n, pooled.ncols()), |(_, j)| dpooled[[0, j]] / T::of(n as f64));
            self.encoder.backward(&self.params, &self.embed, &cache, &dmem, g);
        }
        (loss, p)
    }

    /// Probability that a single window is jazz.
    pub fn window_probability(&self, window: &[Segment]) -> f64 {
        let ids = self.window_ids(window);
        let mut tr = Train::<ChaCha8Rng> { dropout: 0.0, rng: None };
        sigmoid(self.logit(&ids, &mut tr).0.to_f64().expect("finite"))
    }

    /// Mean jazz probability over sliding three-segment windows.
    pub fn classify_genre(&self, segments: &[Segment]) -> Result<f64, ModelError> {
        if segments.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let windows = classification_windows(segments.len());
        let total: f64 = windows.iter().map(|w| self.window_probability(&segments[w.clone()])).sum();
        Ok(total / windows.len() as f64)
    }

    /// Probability of `genre` under [`Self::classify_genre`].
    pub fn genre_probability(&self, segments: &[Segment], genre: Genre) -> Result<f64, ModelError> {
        let p = self.classify_genre(segments)?;
        Ok(match genre {
            Genre::Jazz => p,
            Genre::Classical => 1.0 - p,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
