//! Adam optimizer used by all training stages.
//!
//! Parameters are snapped back onto the f32 grid after every update so
//! checkpoints (which store 32-bit floats) always round-trip losslessly.

use alloc::vec::Vec;

use crate::math;
use crate::model::{snap_f32, Model, Tensors};

#[derive(Debug, Clone, Copy)]
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

/// Adaptive-moment state for one model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &Model) -> Self {
        let zeros = || {
            model
                .tensors
                .0
                .iter()
                .map(|t| alloc::vec![0.0; t.len()])
                .collect::<Vec<Vec<f64>>>()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one descent step of `grads` (callers minimizing a loss pass
    /// its gradient; callers maximizing an objective negate first).
    pub fn step(&mut self, model: &mut Model, grads: &Tensors) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - math::powi(c.beta1, t);
        let bc2 = 1.0 - math::powi(c.beta2, t);
        for (ix, g) in grads.0.iter().enumerate() {
            let p = &mut model.tensors.0[ix];
            let m = &mut self.m[ix];
            let v = &mut self.v[ix];
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = snap_f32(p[j] - c.lr * mhat / (math::sqrt(vhat) + c.eps));
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, tensor_specs, ModelConfig};

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let mut m = init_model(&cfg).unwrap();
        let before = m.tensors.clone();
        let mut opt = Adam::new(AdamConfig::default(), &m);
        let grads = Tensors::zeros_like(&tensor_specs(&cfg));
        opt.step(&mut m, &grads);
        assert_eq!(before, m.tensors);
    }

    #[test]
    fn step_moves_against_gradient_and_stays_on_f32_grid() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let mut m = init_model(&cfg).unwrap();
        let before = m.tensor(0)[0];
        let mut grads = Tensors::zeros_like(&tensor_specs(&cfg));
        grads.0[0][0] = 1.0;
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), &m);
        opt.step(&mut m, &grads);
        let after = m.tensor(0)[0];
        assert!(after < before);
        assert_eq!(after, after as f32 as f64);
    }
}
