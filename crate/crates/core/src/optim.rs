//! AdamW over a flat parameter vector.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Forgets the moments, as if freshly created.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }
}

/// One bias-corrected Adam step with decoupled weight decay:
/// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err("adamw_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = (m / bc1) / (libm::sqrt(v / bc2) + cfg.eps);
        params[i] = params[i] * decay - cfg.lr * update;
    }
    Ok(())
}
