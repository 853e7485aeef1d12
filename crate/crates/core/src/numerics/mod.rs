//! Tensors, reverse-mode autodiff and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{softmax, AttentionLayout, Gradients, Tape, Var, KL_FLOOR};
pub use tensor::Tensor;

use crate::error::{FastError, Result};

/// `KL(p ‖ q) = Σ pᵢ ln(pᵢ / qᵢ)` with `0 · ln(0/q) = 0`; `q` is floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(FastError::dim("kl_divergence", &[p.len()], &[q.len()]));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        let total: f64 = dist.iter().sum();
        if dist.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(FastError::Input(format!(
                "kl_divergence: {name} is not a probability vector (sum {total})"
            )));
        }
    }
    Ok(tape::kl_row(p, q))
}

#[cfg(test)]
mod tests;
