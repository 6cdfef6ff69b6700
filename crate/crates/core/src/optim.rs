//! Adam optimizer over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be > 0, got {}", self.lr)));
        }
        for (key, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{key} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "optimizer.epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Moment buffers for a set of parameter slots. Slots flagged as frozen
/// (batch-norm moving statistics) are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { cfg, m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `trainable[i]` selects the slots to move.
    pub fn update(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], trainable: &[bool]) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = f64::from(g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] = (f64::from(p[j]) - lr * mhat / (vhat.sqrt() + epsilon)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = Adam::new(AdamConfig::default(), [3]);
        let mut p = vec![vec![1.0f32, 1.0, 1.0]];
        opt.update(&mut p, &[vec![0.5, -2.0, 0.0]], &[true]);
        assert!((p[0][0] - 0.999).abs() < 1e-6);
        assert!((p[0][1] - 1.001).abs() < 1e-6);
        assert_eq!(p[0][2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, [1]);
        let mut p = vec![vec![3.0f32]];
        for _ in 0..500 {
            let g = vec![vec![2.0 * (p[0][0] - 1.0)]];
            opt.update(&mut p, &g, &[true]);
        }
        assert!((p[0][0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn frozen_slots_are_untouched() {
        let mut opt = Adam::new(AdamConfig::default(), [1, 1]);
        let mut p = vec![vec![1.0f32], vec![1.0]];
        opt.update(&mut p, &[vec![1.0], vec![1.0]], &[true, false]);
        assert_eq!(p[1][0], 1.0);
        assert!(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
    }
}
