use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Full hyperparameter set. `full()` is the production-scale
/// configuration, `desk()` a minutes-scale one for CI and experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub kernel: usize,
    /// Maximum relative distance T of the windowed attention.
    pub window: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub duration_blocks: usize,
    pub learner_layers: usize,
    pub predictor_blocks: usize,
    pub predictor_convs: usize,
    /// Prosody representation dimension D_p.
    pub prosody_dim: usize,
    /// Gaussian mixture component count C.
    pub mixtures: usize,
    pub dropout: f32,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub use_word_branch: bool,
}

impl ModelConfig {
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 768,
            heads: 2,
            kernel: 3,
            window: 10,
            encoder_blocks: 6,
            decoder_blocks: 6,
            duration_blocks: 3,
            learner_layers: 4,
            predictor_blocks: 4,
            predictor_convs: 3,
            prosody_dim: 3,
            mixtures: 4,
            dropout: 0.1,
            vocab_size,
            word_dim: 64,
            use_word_branch: true,
        }
    }

    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            heads: 2,
            kernel: 3,
            window: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            duration_blocks: 1,
            learner_layers: 4,
            predictor_blocks: 4,
            predictor_convs: 3,
            prosody_dim: 3,
            mixtures: 2,
            dropout: 0.0,
            vocab_size,
            word_dim: 64,
            use_word_branch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        let counts = [
            ("heads", self.heads),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("duration_blocks", self.duration_blocks),
            ("learner_layers", self.learner_layers),
            ("predictor_blocks", self.predictor_blocks),
            ("predictor_convs", self.predictor_convs),
            ("prosody_dim", self.prosody_dim),
            ("mixtures", self.mixtures),
            ("vocab_size", self.vocab_size),
            ("word_dim", self.word_dim),
            ("kernel", self.kernel),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Apply a flat key=value override (config files and CLI flags).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: std::num::ParseIntError| Error::Config(format!("{key}: {e}"));
        match key {
            "d_model" => self.d_model = value.parse().map_err(bad)?,
            "heads" => self.heads = value.parse().map_err(bad)?,
            "kernel" => self.kernel = value.parse().map_err(bad)?,
            "window" => self.window = value.parse().map_err(bad)?,
            "encoder_blocks" => self.encoder_blocks = value.parse().map_err(bad)?,
            "decoder_blocks" => self.decoder_blocks = value.parse().map_err(bad)?,
            "duration_blocks" => self.duration_blocks = value.parse().map_err(bad)?,
            "learner_layers" => self.learner_layers = value.parse().map_err(bad)?,
            "predictor_blocks" => self.predictor_blocks = value.parse().map_err(bad)?,
            "predictor_convs" => self.predictor_convs = value.parse().map_err(bad)?,
            "prosody_dim" => self.prosody_dim = value.parse().map_err(bad)?,
            "mixtures" => self.mixtures = value.parse().map_err(bad)?,
            "vocab_size" => self.vocab_size = value.parse().map_err(bad)?,
            "word_dim" => self.word_dim = value.parse().map_err(bad)?,
            "dropout" => {
                self.dropout = value
                    .parse()
                    .map_err(|e| Error::Config(format!("dropout: {e}")))?;
            }
            "use_word_branch" => {
                self.use_word_branch = value
                    .parse()
                    .map_err(|e| Error::Config(format!("use_word_branch: {e}")))?;
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full(33).validate().unwrap();
        ModelConfig::desk(33).validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::desk(33);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_even_kernel() {
        let mut c = ModelConfig::desk(33);
        c.kernel = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn set_overrides_and_rejects_unknown_keys() {
        let mut c = ModelConfig::desk(33);
        c.set("d_model", "32").unwrap();
        c.set("use_word_branch", "false").unwrap();
        assert_eq!(c.d_model, 32);
        assert!(!c.use_word_branch);
        assert!(c.set("nonsense", "1").is_err());
    }
}
