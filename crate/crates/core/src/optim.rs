//! Adam and global-norm gradient clipping.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with one pair of moment buffers per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            config,
            v: m.clone(),
            m,
            step: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates skipped because a gradient was not finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update. Frozen parameters are never touched. Returns
    /// `false` (and counts a skip) when any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(ParamId, Vec<f64>)]) -> bool {
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(beta1, t);
        let bc2 = 1.0 - libm::pow(beta2, t);
        for (id, g) in grads {
            if !params.get(*id).trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.tensor_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        true
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let total = libm::sqrt(
        grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>(),
    );
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    total
}
