use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FastError, Result};
use crate::model::config::Activation;
use crate::numerics::Tensor;

/// Standard deviation of the initial stamp keys.
pub const STAMP_KEY_STD: f64 = 0.02;

/// Parallel adapter `Act(h K'ᵀ) V'` added to one FFN sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessStamp {
    /// `K'`, shape `[d_c, d_model]`.
    pub keys: Tensor,
    /// `V'`, shape `[d_c, d_model]`.
    pub values: Tensor,
    pub activation: Activation,
}

impl FairnessStamp {
    /// Random small-normal keys and zero values, so the stamp initially adds exactly zero.
    pub fn new(hidden: usize, d_model: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FairnessStamp {
            keys: Tensor::randn(&[hidden, d_model], STAMP_KEY_STD, &mut rng),
            values: Tensor::zeros(&[hidden, d_model]),
            activation,
        }
    }

    pub fn from_parts(keys: Tensor, values: Tensor, activation: Activation) -> Result<Self> {
        if keys.shape().len() != 2 || keys.shape() != values.shape() {
            return Err(FastError::dim("stamp", keys.shape(), values.shape()));
        }
        Ok(FairnessStamp {
            keys,
            values,
            activation,
        })
    }

    /// `d_c`.
    pub fn hidden(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.keys.shape()[1]
    }

    /// `2 · d_c · d_model`.
    pub fn param_count(&self) -> usize {
        self.keys.len() + self.values.len()
    }
}
