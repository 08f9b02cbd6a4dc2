//! The refiner (encoder-decoder) and genre classifier, their training loops,
//! sampling with logit constraints, and the checkpoint format.

mod checkpoint;
mod classifier;
mod config;
mod network;
mod refiner;
mod sampling;
mod train;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointKind, OptimizerState};
pub use classifier::{classification_windows, ClassifierExample, GenreClassifier};
pub use config::{ModelConfig, Preset};
pub use network::{DecodeState, DecoderStack, EncoderStack, Train};
pub use refiner::{
    build_encoder_input, fit_encoder_input, make_training_example, ContextSpec, RefineOptions, RefineOutput, Refiner, TrainingExample,
};
pub use sampling::{sample_index, softmax_with_temperature, FnConstraint, GrammarConstraint, LogitConstraint};
pub use train::{
    evaluate_classifier, train_classifier, ClassifierReport, ClassifierTrainConfig, LabeledPiece, RefinerTrainConfig,
    RefinerTrainer, TrainingPiece,
};

use crate::nn::{Embedding, Grads, ParamStore, Real};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("encoder input has {len} tokens but the model accepts at most {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("segment index {index} is out of range 1..={count}")]
    SegmentOutOfRange { index: usize, count: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("training corpus is unusable: {0}")]
    Corpus(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocabulary mismatch: checkpoint was built for `{found}`")]
    VocabMismatch { found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loss statistics for one teacher-forced sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    /// Mean cross-entropy per target token.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// Mean softmax cross-entropy over rows; returns the gradient with respect
/// to the logits when `want_grad`.
pub fn cross_entropy<T: Real>(logits: &Array2<T>, targets: &[usize], want_grad: bool) -> (LossStats, Option<Array2<T>>) {
    let n = targets.len();
    let inv_n = T::one() / T::of(n.max(1) as f64);
    let mut grad = want_grad.then(|| Array2::zeros(logits.raw_dim()));
    let mut total = 0.0;
    let mut correct = 0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let (argmax, max) = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) });
        correct += usize::from(argmax == t);
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let lse = max + sum.ln();
        total += (lse - row[t]).to_f64().expect("finite");
        if let Some(g) = grad.as_mut() {
            let mut grow = g.row_mut(i);
            for (gv, &v) in grow.iter_mut().zip(row.iter()) {
                *gv = (v - lse).exp() * inv_n;
            }
            grow[t] -= inv_n;
        }
    }
    (LossStats { loss: total / n.max(1) as f64, correct, count: n }, grad)
}

/// Encoder-decoder transformer with a shared token embedding and an
/// untied output projection.
#[derive(Debug, Clone)]
pub struct Seq2Seq<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    embed: Embedding,
    encoder: EncoderStack,
    decoder: DecoderStack,
}

impl<T: Real> Seq2Seq<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embed = Embedding::new(&mut params, "embed", config.vocab_size, config.d_model, config.init_std, &mut rng);
        let encoder = EncoderStack::new(&mut params, "enc", &config, &mut rng);
        let decoder = DecoderStack::new(&mut params, "dec", &config, &mut rng);
        Self { config, params, embed, encoder, decoder }
    }

    /// Same architecture in another precision.
    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn check_lengths(&self, enc_len: usize, dec_len: usize) -> Result<(), ModelError> {
        if enc_len == 0 {
            return Err(ModelError::EmptySequence);
        }
        if enc_len > self.config.max_encoder_len {
            return Err(ModelError::InputTooLong { len: enc_len, max: self.config.max_encoder_len });
        }
        if dec_len > self.config.max_decoder_len {
            return Err(ModelError::InputTooLong { len: dec_len, max: self.config.max_decoder_len });
        }
        Ok(())
    }

    /// Teacher-forced loss on one example. When `grads` is given the
    /// gradient of the mean loss is accumulated into it.
    pub fn loss<R: Rng>(
        &self,
        enc_ids: &[usize],
        dec_in: &[usize],
        targets: &[usize],
        tr: &mut Train<R>,
        grads: Option<&mut Grads<T>>,
    ) -> LossStats {
        let ps = &self.params;
        let (memory, enc_cache) = self.encoder.forward(ps, &self.embed, enc_ids, tr);
        let (logits, dec_cache) = self.decoder.forward(ps, &self.embed, dec_in, &memory, tr);
        let (stats, dlogits) = cross_entropy(&logits, targets, grads.is_some());
        if let (Some(g), Some(dlogits)) = (grads, dlogits) {
            let dmem = self.decoder.backward(ps, &self.embed, &dec_cache, &dlogits, memory.dim(), g);
            self.encoder.backward(ps, &self.embed, &enc_cache, &dmem, g);
        }
        stats
    }

    /// Encodes the input and prepares cached decoding.
    pub fn start_decode(&self, enc_ids: &[usize]) -> DecodeState<T> {
        let mut tr = Train::<ChaCha8Rng> { dropout: 0.0, rng: None };
        let (memory, _) = self.encoder.forward(&self.params, &self.embed, enc_ids, &mut tr);
        self.decoder.start(&self.params, &memory, self.config.max_decoder_len)
    }

    pub fn decode_step(&self, state: &mut DecodeState<T>, id: usize) -> Array1<T> {
        self.decoder.step(&self.params, &self.embed, state, id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize, salt: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7919 + salt * 31) % 200 + 8).collect()
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let logits = Array2::<f64>::zeros((3, 10));
        let (s, g) = cross_entropy(&logits, &[1, 2, 3], true);
        assert!((s.loss - 10f64.ln()).abs() < 1e-12);
        let g = g.unwrap();
        assert!((g.sum()).abs() < 1e-12);
    }

    /// Central differences on randomly chosen scalars of the micro network.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let model = Seq2Seq::<f64>::new(Preset::Micro.refiner(), 11);
        let (enc, dec_in, tgt) = (ids(12, 1), ids(6, 2), ids(6, 3));
        let mut tr = Train::<ChaCha8Rng> { dropout: 0.0, rng: None };
        let mut grads = model.params.zero_grads();
        model.loss(&enc, &dec_in, &tgt, &mut tr, Some(&mut grads));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shapes: Vec<_> = model.params.iter().map(|(_, v)| v.dim()).collect();
        let mut probe = model.clone();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        while checked < 100 {
            let p = rand::RngExt::random_range(&mut rng, 0..shapes.len());
            let (r, c) = shapes[p];
            let (i, j) = (rand::RngExt::random_range(&mut rng, 0..r), rand::RngExt::random_range(&mut rng, 0..c));
            let id = crate::nn::ParamId(p);
            let analytic = grads.get(id)[[i, j]];
            let h = 1e-5;
            let orig = probe.params.get(id)[[i, j]];
            probe.params.get_mut(id)[[i, j]] = orig + h;
            let up = probe.loss(&enc, &dec_in, &tgt, &mut tr, None).loss;
            probe.params.get_mut(id)[[i, j]] = orig - h;
            let down = probe.loss(&enc, &dec_in, &tgt, &mut tr, None).loss;
            probe.params.get_mut(id)[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * h);
            // Rows of the embedding and position tables that this input never
            // touches have zero gradient on both routes; they say nothing
            // about correctness, so they do not count toward the sample.
            if analytic.abs() < 1e-12 && numeric.abs() < 1e-9 {
                continue;
            }
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-7);
            worst = worst.max(rel);
            checked += 1;
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn cached_decoding_matches_teacher_forcing() {
        let model = Seq2Seq::<f64>::new(Preset::Micro.refiner(), 2);
        let enc = ids(10, 4);
        let dec = ids(5, 9);
        let mut tr = Train::<ChaCha8Rng> { dropout: 0.0, rng: None };
        let (memory, _) = model.encoder.forward(&model.params, &model.embed, &enc, &mut tr);
        let (full, _) = model.decoder.forward(&model.params, &model.embed, &dec, &memory, &mut tr);
        let mut state = model.start_decode(&enc);
        for (t, &id) in dec.iter().enumerate() {
            let row = model.decode_step(&mut state, id);
            for v in 0..row.len() {
                assert!((row[v] - full[[t, v]]).abs() < 1e-10);
            }
        }
    }
}
