//! AdamW with bias correction, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

/// Optimizer state: first and second moments and the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
        }
    }
}

/// One step at learning rate `lr`:
///
/// ```text
/// t  <- t + 1
/// m  <- b1 m + (1 - b1) g
/// v  <- b2 v + (1 - b2) g^2
/// m^ =  m / (1 - b1^t),   v^ = v / (1 - b2^t)
/// θ  <- θ (1 - lr wd)
/// θ  <- θ - lr m^ / (sqrt(v^) + eps)
/// ```
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamWConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] = params[i] * decay - lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Rescales `grads` so their L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    n
}
