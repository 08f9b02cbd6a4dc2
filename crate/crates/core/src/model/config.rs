use serde::{Deserialize, Serialize};

use crate::tokenizer::VOCAB_SIZE;

/// Architecture of the encoder-decoder refiner (or, with zero decoder
/// layers, the classifier encoder).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
    pub dropout: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Two-layer toy network used for gradient checks.
    Micro,
    /// Small network for quick experiments on one CPU core.
    Tiny,
    /// 4+4 layers, width 128: trainable on a desktop CPU in minutes.
    Desk,
    /// 12+12 layers, width 512, 2048/512 token windows.
    Full,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Micro, Preset::Tiny, Preset::Desk, Preset::Full];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Micro => "micro",
            Preset::Tiny => "tiny",
            Preset::Desk => "desk",
            Preset::Full => "full",
        }
    }

    /// Warm-up fraction of the learning-rate schedule: 0.3 for the full-size
    /// preset, 0.1 otherwise.
    pub fn warmup_ratio(self) -> f64 {
        match self {
            Preset::Full => 0.3,
            _ => 0.1,
        }
    }

    pub fn refiner(self) -> ModelConfig {
        let base = ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            heads: 4,
            d_ff: 512,
            encoder_layers: 4,
            decoder_layers: 4,
            max_encoder_len: 1024,
            max_decoder_len: 256,
            dropout: 0.1,
            init_std: 0.02,
        };
        match self {
            Preset::Micro => ModelConfig {
                d_model: 8,
                heads: 2,
                d_ff: 16,
                encoder_layers: 2,
                decoder_layers: 2,
                max_encoder_len: 64,
                max_decoder_len: 32,
                dropout: 0.0,
                init_std: 0.2,
                ..base
            },
            Preset::Tiny => ModelConfig {
                d_model: 64,
                heads: 4,
                d_ff: 256,
                encoder_layers: 2,
                decoder_layers: 2,
                max_encoder_len: 512,
                ..base
            },
            Preset::Desk => base,
            Preset::Full => ModelConfig {
                d_model: 512,
                heads: 8,
                d_ff: 2048,
                encoder_layers: 12,
                decoder_layers: 12,
                max_encoder_len: 2048,
                max_decoder_len: 512,
                ..base
            },
        }
    }

    /// Encoder-only classifier with a 1024-token window.
    pub fn classifier(self) -> ModelConfig {
        ModelConfig { decoder_layers: 0, max_decoder_len: 0, max_encoder_len: 1024, ..self.refiner() }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown preset `{s}` (expected micro, tiny, desk or full)"))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
