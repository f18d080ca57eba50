//! Per-edge radial MLP: `w(d) = env(d) * W2 silu(W1 rbf(d) + b1)`.

use crate::params::{Init, ParamBuilder, Slot};

#[derive(Debug, Clone)]
pub(crate) struct RadialSlots {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub hidden: usize,
    pub basis: usize,
    pub out: usize,
}

impl RadialSlots {
    pub fn register(b: &mut ParamBuilder, prefix: &str, basis: usize, hidden: usize, out: usize) -> Self {
        Self {
            w1: b.add(format!("{prefix}.w1"), &[hidden, basis], Init::FanIn(basis)),
            b1: b.add(format!("{prefix}.b1"), &[hidden], Init::FanIn(basis)),
            w2: b.add(format!("{prefix}.w2"), &[out, hidden], Init::FanIn(hidden)),
            hidden,
            basis,
            out,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Radial outputs for every edge plus what the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct RadialCache {
    pub pre: Vec<f64>,
    pub hid: Vec<f64>,
    /// `E x out`, already multiplied by the envelope.
    pub out: Vec<f64>,
}

pub(crate) fn radial_forward(s: &RadialSlots, params: &[f64], rbf: &[f64], env: &[f64]) -> RadialCache {
    let n_edges = env.len();
    let (h, b, o) = (s.hidden, s.basis, s.out);
    let w1 = s.w1.of(params);
    let b1 = s.b1.of(params);
    let w2 = s.w2.of(params);
    let mut pre = vec![0.0; n_edges * h];
    let mut hid = vec![0.0; n_edges * h];
    let mut out = vec![0.0; n_edges * o];
    for e in 0..n_edges {
        let r = &rbf[e * b..(e + 1) * b];
        let pe = &mut pre[e * h..(e + 1) * h];
        let he = &mut hid[e * h..(e + 1) * h];
        for j in 0..h {
            let row = &w1[j * b..(j + 1) * b];
            pe[j] = b1[j] + row.iter().zip(r).map(|(w, x)| w * x).sum::<f64>();
            he[j] = silu(pe[j]);
        }
        let oe = &mut out[e * o..(e + 1) * o];
        for k in 0..o {
            let row = &w2[k * h..(k + 1) * h];
            oe[k] = env[e] * row.iter().zip(he.iter()).map(|(w, x)| w * x).sum::<f64>();
        }
    }
    RadialCache { pre, hid, out }
}

/// Accumulates parameter gradients given `d_out` (`E x out`).
pub(crate) fn radial_backward(
    s: &RadialSlots,
    params: &[f64],
    rbf: &[f64],
    env: &[f64],
    cache: &RadialCache,
    d_out: &[f64],
    grads: &mut [f64],
) {
    let (h, b, o) = (s.hidden, s.basis, s.out);
    let w2 = s.w2.of(params).to_vec();
    let mut dhid = vec![0.0; h];
    for e in 0..env.len() {
        let de = &d_out[e * o..(e + 1) * o];
        if env[e] == 0.0 || de.iter().all(|&v| v == 0.0) {
            continue;
        }
        let he = &cache.hid[e * h..(e + 1) * h];
        dhid.fill(0.0);
        {
            let dw2 = s.w2.of_mut(grads);
            for k in 0..o {
                let g = env[e] * de[k];
                if g == 0.0 {
                    continue;
                }
                for j in 0..h {
                    dw2[k * h + j] += g * he[j];
                    dhid[j] += g * w2[k * h + j];
                }
            }
        }
        let pe = &cache.pre[e * h..(e + 1) * h];
        let r = &rbf[e * b..(e + 1) * b];
        for j in 0..h {
            let dp = dhid[j] * silu_grad(pe[j]);
            s.b1.of_mut(grads)[j] += dp;
            let dw1 = s.w1.of_mut(grads);
            for (k, x) in r.iter().enumerate() {
                dw1[j * b + k] += dp * x;
            }
        }
    }
}
