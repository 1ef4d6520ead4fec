//! Adam with decoupled weight decay.
//!
//! ```text
//! p ← p · (1 − lr·λ)                      (decay, only where enabled)
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! p ← p − lr · m̂ / (√v̂ + ε),   m̂ = m / (1 − β₁ᵗ),  v̂ = v / (1 − β₂ᵗ)
//! ```

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// One AdamW step on a flat parameter slice. `step` is the 1-based count
/// of updates including this one.
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamWConfig, decay: bool) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let shrink = if decay { 1.0 - cfg.lr * cfg.weight_decay } else { 1.0 };
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] * shrink - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer state over every tensor of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<Tensor>) -> Result<Self> {
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        let zeros = || params.iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self { cfg, step: 0, m: zeros(), v: zeros() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update using the gradients stored on each tensor.
    /// Tensors without a gradient are treated as having a zero gradient; a
    /// frozen prototype bank is skipped entirely.
    pub fn step(&mut self, params: &mut ParamSet<Tensor>) {
        self.step += 1;
        let infos = params.infos();
        let frozen = params.prototypes.frozen;
        for (((t, info), m), v) in params.iter_mut().zip(&infos).zip(&mut self.m).zip(&mut self.v) {
            if frozen && info.group == ParamGroup::Prototypes {
                continue;
            }
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            adamw_update(t.data_mut(), &grad, m, v, self.step, &self.cfg, info.decay);
        }
    }
}
