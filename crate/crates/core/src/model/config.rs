use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization applied before attention, before the FFN and before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// RMS normalization followed by a learned per-channel gain.
    #[default]
    Rms,
    /// Pass-through; the gain vector is kept in the archive but ignored.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

fn default_eps() -> f32 {
    1e-6
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default)]
    pub block_norm: NormKind,
    #[serde(default)]
    pub final_norm: NormKind,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
}

impl ModelConfig {
    /// A small config with RMS norms and GELU, useful for tests and random models.
    pub fn small(vocab_size: usize, n_layers: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            vocab_size,
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            max_seq: 64,
            seed: 0,
            block_norm: NormKind::Rms,
            final_norm: NormKind::Rms,
            activation: Activation::Gelu,
            norm_eps: default_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers < 2 {
            return fail(format!("n_layers must be >= 2, got {}", self.n_layers));
        }
        if self.vocab_size < 8 {
            return fail(format!("vocab_size must be >= 8, got {}", self.vocab_size));
        }
        if self.max_seq < 16 {
            return fail(format!("max_seq must be >= 16, got {}", self.max_seq));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return fail("norm_eps must be finite and non-negative".into());
        }
        Ok(())
    }
}
