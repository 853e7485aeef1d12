use serde::{Deserialize, Serialize};

use crate::error::{FastError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 256,
            max_seq_len: 16,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(FastError::Validation(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FastError::Validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(FastError::Validation("vocabulary must hold the reserved tokens".into()));
        }
        Ok(())
    }

    /// Number of base-model scalars (stamps excluded).
    pub fn param_count(&self) -> usize {
        let (v, s, d, f) = (self.vocab_size, self.max_seq_len, self.d_model, self.d_ffn);
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + 2 * f * d;
        v * d + s * d + self.n_layers * per_layer + 2 * d + d * d + d + v
    }
}
