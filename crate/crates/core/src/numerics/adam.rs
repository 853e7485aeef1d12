//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{FastError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Moments are zero tensors shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(FastError::dim(
                "adam_step",
                &[self.first.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(FastError::dim("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &[&p]);
        for _ in 0..3 {
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + eps).
        let mut p = Tensor::scalar(0.5);
        let g = Tensor::scalar(1.0);
        let cfg = AdamConfig::with_lr(0.1);
        let mut adam = AdamState::new(cfg, &[&p]);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + cfg.eps);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut adam = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(matches!(
            adam.step(&mut [&mut p], &[&g]),
            Err(FastError::Dimension { .. })
        ));
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, -0.7]);
            let mut adam = AdamState::new(AdamConfig::with_lr(0.05), &[&p]);
            for i in 0..10 {
                let g = Tensor::vector(vec![(i as f64).sin(), p.data()[0] * 2.0]);
                adam.step(&mut [&mut p], &[&g]).unwrap();
            }
            p.into_data()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
