//! Equivariant graph-attention layer and its hand-written adjoint.
//!
//! Forward, per layer:
//! 1. `n = rmsnorm(h)` per node over all degrees, with per-degree, per-channel gains;
//! 2. edge input `x_ts = W_dst n_t + W_src n_s` (concatenation + linear mix);
//! 3. message `v_ts = sum_paths w_p(|r_ts|) (x_ts^{l1} ⊗ Y^{l2}(r_ts))^{l3}`;
//! 4. logits `z_ts = k . LeakyReLU(A_dst n0_t + A_src n0_s + b)` from scalars;
//! 5. `a_ts = env_ts exp(z_ts) / sum_s env_ts exp(z_ts)` over kept edges;
//! 6. `h'_t = h_t + W_out sum_s a_ts v_ts`.

use super::radial::{RadialCache, RadialSlots};
use super::{Dims, Geometry, MsgPath};
use crate::params::{Init, ParamBuilder, Slot};

pub(crate) const LEAKY_SLOPE: f64 = 0.01;
const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub gain: Slot,
    pub w_dst: Slot,
    pub w_src: Slot,
    pub w_out: Slot,
    pub att_dst: Slot,
    pub att_src: Slot,
    pub att_b: Slot,
    pub att_k: Slot,
    pub radial: RadialSlots,
}

impl LayerSlots {
    pub fn register(b: &mut ParamBuilder, prefix: &str, dims: &Dims, num_basis: usize, radial_hidden: usize) -> Self {
        let (nl, c, heads, a) = (dims.l_max + 1, dims.c, dims.heads, dims.attn);
        Self {
            gain: b.add(format!("{prefix}.norm_gain"), &[nl, c], Init::Const(1.0)),
            w_dst: b.add(format!("{prefix}.w_dst"), &[nl, c, c], Init::FanIn(2 * c)),
            w_src: b.add(format!("{prefix}.w_src"), &[nl, c, c], Init::FanIn(2 * c)),
            w_out: b.add(format!("{prefix}.w_out"), &[nl, c, c], Init::FanIn(c)),
            att_dst: b.add(format!("{prefix}.att_dst"), &[heads, a, c], Init::FanIn(2 * c)),
            att_src: b.add(format!("{prefix}.att_src"), &[heads, a, c], Init::FanIn(2 * c)),
            att_b: b.add(format!("{prefix}.att_b"), &[heads, a], Init::FanIn(2 * c)),
            att_k: b.add(format!("{prefix}.att_k"), &[heads, a], Init::FanIn(a)),
            radial: RadialSlots::register(
                b,
                &format!("{prefix}.radial"),
                num_basis,
                radial_hidden,
                dims.n_paths * c,
            ),
        }
    }
}

pub(crate) struct LayerCtx<'a> {
    pub dims: &'a Dims,
    pub paths: &'a [MsgPath],
    pub geom: &'a Geometry,
    pub params: &'a [f64],
    pub slots: &'a LayerSlots,
    pub radial: &'a RadialCache,
    /// Per-edge keep flags; `None` keeps every edge.
    pub mask: Option<&'a [bool]>,
}

/// Intermediates of one layer application.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerTape {
    rms: Vec<f64>,
    n: Vec<f64>,
    att_pre: Vec<f64>,
    pub(crate) a: Vec<f64>,
    x: Vec<f64>,
    v: Vec<f64>,
    agg: Vec<f64>,
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// `out[l] = W[l] in[l]` per degree for one node (`W` is `[l][c][c']`).
fn mix_node(dims: &Dims, w: &[f64], inp: &[f64], out: &mut [f64]) {
    let c = dims.c;
    for l in 0..=dims.l_max {
        let d = 2 * l + 1;
        let off = c * l * l;
        let wl = &w[l * c * c..(l + 1) * c * c];
        for co in 0..c {
            let ob = &mut out[off + co * d..off + (co + 1) * d];
            ob.fill(0.0);
            for ci in 0..c {
                let wv = wl[co * c + ci];
                if wv == 0.0 {
                    continue;
                }
                let ib = &inp[off + ci * d..off + (ci + 1) * d];
                for m in 0..d {
                    ob[m] += wv * ib[m];
                }
            }
        }
    }
}

/// `d_in[l] += W[l]^T d_out[l]` and optionally `dW[l] += d_out[l] in[l]^T`.
fn mix_node_backward(dims: &Dims, w: &[f64], inp: &[f64], d_out: &[f64], d_in: &mut [f64], d_w: Option<&mut [f64]>) {
    let c = dims.c;
    for l in 0..=dims.l_max {
        let d = 2 * l + 1;
        let off = c * l * l;
        let wl = &w[l * c * c..(l + 1) * c * c];
        for co in 0..c {
            let gb = &d_out[off + co * d..off + (co + 1) * d];
            for ci in 0..c {
                let wv = wl[co * c + ci];
                let db = &mut d_in[off + ci * d..off + (ci + 1) * d];
                for m in 0..d {
                    db[m] += wv * gb[m];
                }
            }
        }
    }
    if let Some(dw) = d_w {
        for l in 0..=dims.l_max {
            let d = 2 * l + 1;
            let off = c * l * l;
            for co in 0..c {
                let gb = &d_out[off + co * d..off + (co + 1) * d];
                for ci in 0..c {
                    let ib = &inp[off + ci * d..off + (ci + 1) * d];
                    dw[l * c * c + co * c + ci] += gb.iter().zip(ib).map(|(g, x)| g * x).sum::<f64>();
                }
            }
        }
    }
}

impl LayerCtx<'_> {
    fn kept(&self, e: usize) -> bool {
        self.mask.map_or(true, |m| m[e])
    }

    pub fn forward(&self, h: &[f64], tape: Option<&mut LayerTape>) -> Vec<f64> {
        let dims = self.dims;
        let (c, dn, nl) = (dims.c, dims.d, dims.l_max + 1);
        let (heads, na) = (dims.heads, dims.attn);
        let per_head = c / heads;
        let n_nodes = h.len() / dn;
        let edges = &self.geom.edges;
        let n_edges = edges.len();
        let p = self.params;
        let gain = self.slots.gain.of(p);

        // 1. norm
        let mut rms = vec![0.0; n_nodes];
        let mut n = vec![0.0; h.len()];
        for i in 0..n_nodes {
            let node = &h[i * dn..(i + 1) * dn];
            let ms = node.iter().map(|v| v * v).sum::<f64>() / dn as f64;
            let r = (ms + NORM_EPS).sqrt();
            rms[i] = r;
            for l in 0..nl {
                let off = i * dn + c * l * l;
                for ch in 0..c {
                    let g = gain[l * c + ch] / r;
                    for m in 0..2 * l + 1 {
                        let j = off + ch * (2 * l + 1) + m;
                        n[j] = g * h[j];
                    }
                }
            }
        }

        // 2. per-node projections
        let mut a_dst = vec![0.0; h.len()];
        let mut a_src = vec![0.0; h.len()];
        let w_dst = self.slots.w_dst.of(p);
        let w_src = self.slots.w_src.of(p);
        let att_dst = self.slots.att_dst.of(p);
        let att_src = self.slots.att_src.of(p);
        let att_b = self.slots.att_b.of(p);
        let att_k = self.slots.att_k.of(p);
        let ha = heads * na;
        let mut pa = vec![0.0; n_nodes * ha];
        let mut pb = vec![0.0; n_nodes * ha];
        for i in 0..n_nodes {
            let ni = &n[i * dn..(i + 1) * dn];
            mix_node(dims, w_dst, ni, &mut a_dst[i * dn..(i + 1) * dn]);
            mix_node(dims, w_src, ni, &mut a_src[i * dn..(i + 1) * dn]);
            let n0 = &ni[..c];
            for q in 0..ha {
                pa[i * ha + q] = att_dst[q * c..(q + 1) * c].iter().zip(n0).map(|(w, x)| w * x).sum();
                pb[i * ha + q] = att_src[q * c..(q + 1) * c].iter().zip(n0).map(|(w, x)| w * x).sum();
            }
        }

        // 3-4. messages and logits
        let np = dims.n_paths;
        let mut x = vec![0.0; n_edges * dn];
        let mut v = vec![0.0; n_edges * dn];
        let mut att_pre = vec![0.0; n_edges * ha];
        let mut logits = vec![0.0; n_edges * heads];
        for e in 0..n_edges {
            let (s, t) = edges.edges[e];
            let xe = &mut x[e * dn..(e + 1) * dn];
            for j in 0..dn {
                xe[j] = a_dst[t * dn + j] + a_src[s * dn + j];
            }
            let ve = &mut v[e * dn..(e + 1) * dn];
            let we = &self.radial.out[e * np * c..(e + 1) * np * c];
            let te = &self.geom.tmat[e * dims.tsize..(e + 1) * dims.tsize];
            for (pi, path) in self.paths.iter().enumerate() {
                let (d1, d3) = (2 * path.l1 + 1, 2 * path.l3 + 1);
                let tm = &te[path.t_off..path.t_off + d1 * d3];
                for ch in 0..c {
                    let w = we[pi * c + ch];
                    let xin = &xe[c * path.l1 * path.l1 + ch * d1..][..d1];
                    let vo = &mut ve[c * path.l3 * path.l3 + ch * d3..][..d3];
                    for m1 in 0..d1 {
                        let xv = w * xin[m1];
                        let row = &tm[m1 * d3..(m1 + 1) * d3];
                        for m3 in 0..d3 {
                            vo[m3] += xv * row[m3];
                        }
                    }
                }
            }
            for hd in 0..heads {
                let mut z = 0.0;
                for k in 0..na {
                    let q = hd * na + k;
                    let pre = pa[t * ha + q] + pb[s * ha + q] + att_b[q];
                    att_pre[e * ha + q] = pre;
                    z += att_k[q] * leaky(pre);
                }
                logits[e * heads + hd] = z;
            }
        }

        // 5. gated softmax per target and head
        let mut a = vec![0.0; n_edges * heads];
        for t in 0..n_nodes {
            let range = edges.incoming(t);
            for hd in 0..heads {
                let zmax = range
                    .clone()
                    .filter(|&e| self.kept(e))
                    .map(|e| logits[e * heads + hd])
                    .fold(f64::NEG_INFINITY, f64::max);
                if !zmax.is_finite() {
                    continue;
                }
                let mut sum = 0.0;
                for e in range.clone() {
                    if self.kept(e) {
                        let q = self.geom.env[e] * (logits[e * heads + hd] - zmax).exp();
                        a[e * heads + hd] = q;
                        sum += q;
                    }
                }
                if sum > 0.0 {
                    for e in range.clone() {
                        a[e * heads + hd] /= sum;
                    }
                }
            }
        }

        // 6. aggregate and residual update
        let mut agg = vec![0.0; h.len()];
        for e in 0..n_edges {
            if !self.kept(e) {
                continue;
            }
            let t = edges.edges[e].1;
            let ve = &v[e * dn..(e + 1) * dn];
            let at = &mut agg[t * dn..(t + 1) * dn];
            for l in 0..nl {
                let d = 2 * l + 1;
                for ch in 0..c {
                    let w = a[e * heads + ch / per_head];
                    let off = c * l * l + ch * d;
                    for m in 0..d {
                        at[off + m] += w * ve[off + m];
                    }
                }
            }
        }
        let w_out = self.slots.w_out.of(p);
        let mut out = h.to_vec();
        let mut tmp = vec![0.0; dn];
        for i in 0..n_nodes {
            mix_node(dims, w_out, &agg[i * dn..(i + 1) * dn], &mut tmp);
            for j in 0..dn {
                out[i * dn + j] += tmp[j];
            }
        }

        if let Some(tape) = tape {
            *tape = LayerTape {
                rms,
                n,
                att_pre,
                a,
                x,
                v,
                agg,
            };
        }
        out
    }

    /// Adds `d_out^T ∂out/∂h` into `d_h`. When `grads` is given, also
    /// accumulates parameter gradients (radial outputs go to `d_radial`,
    /// `E x paths x channels`, to be pushed through the radial MLP later).
    pub fn backward(
        &self,
        h: &[f64],
        tape: &LayerTape,
        d_out: &[f64],
        d_h: &mut [f64],
        mut grads: Option<(&mut [f64], &mut [f64])>,
    ) {
        let dims = self.dims;
        let (c, dn, nl) = (dims.c, dims.d, dims.l_max + 1);
        let (heads, na) = (dims.heads, dims.attn);
        let ha = heads * na;
        let per_head = c / heads;
        let n_nodes = h.len() / dn;
        let edges = &self.geom.edges;
        let n_edges = edges.len();
        let np = dims.n_paths;
        let p = self.params;

        for (dh, g) in d_h.iter_mut().zip(d_out) {
            *dh += g;
        }

        // residual branch: agg -> W_out
        let w_out = self.slots.w_out.of(p);
        let mut d_agg = vec![0.0; h.len()];
        for i in 0..n_nodes {
            let r = i * dn..(i + 1) * dn;
            let dw = grads.as_mut().map(|(g, _)| self.slots.w_out.of_mut(g));
            mix_node_backward(dims, w_out, &tape.agg[r.clone()], &d_out[r.clone()], &mut d_agg[r], dw);
        }

        // attention weights and messages
        let mut d_a = vec![0.0; n_edges * heads];
        let mut d_v = vec![0.0; n_edges * dn];
        for e in 0..n_edges {
            if !self.kept(e) {
                continue;
            }
            let t = edges.edges[e].1;
            let ve = &tape.v[e * dn..(e + 1) * dn];
            let dg = &d_agg[t * dn..(t + 1) * dn];
            let dve = &mut d_v[e * dn..(e + 1) * dn];
            for l in 0..nl {
                let d = 2 * l + 1;
                for ch in 0..c {
                    let hd = ch / per_head;
                    let w = tape.a[e * heads + hd];
                    let off = c * l * l + ch * d;
                    let mut acc = 0.0;
                    for m in 0..d {
                        acc += dg[off + m] * ve[off + m];
                        dve[off + m] = w * dg[off + m];
                    }
                    d_a[e * heads + hd] += acc;
                }
            }
        }

        // softmax -> logits -> attention MLP
        let att_k = self.slots.att_k.of(p);
        let mut d_pa = vec![0.0; n_nodes * ha];
        let mut d_pb = vec![0.0; n_nodes * ha];
        for t in 0..n_nodes {
            let range = edges.incoming(t);
            for hd in 0..heads {
                let dot: f64 = range
                    .clone()
                    .map(|e| tape.a[e * heads + hd] * d_a[e * heads + hd])
                    .sum();
                for e in range.clone() {
                    let ae = tape.a[e * heads + hd];
                    if ae == 0.0 {
                        continue;
                    }
                    let dz = ae * (d_a[e * heads + hd] - dot);
                    let s = edges.edges[e].0;
                    for k in 0..na {
                        let q = hd * na + k;
                        let pre = tape.att_pre[e * ha + q];
                        if let Some((g, _)) = grads.as_mut() {
                            self.slots.att_k.of_mut(g)[q] += dz * leaky(pre);
                        }
                        let dp = dz * att_k[q] * leaky_grad(pre);
                        d_pa[t * ha + q] += dp;
                        d_pb[s * ha + q] += dp;
                        if let Some((g, _)) = grads.as_mut() {
                            self.slots.att_b.of_mut(g)[q] += dp;
                        }
                    }
                }
            }
        }

        // messages -> edge inputs (and radial weights)
        let mut d_adst = vec![0.0; h.len()];
        let mut d_asrc = vec![0.0; h.len()];
        let mut dx = vec![0.0; dn];
        for e in 0..n_edges {
            let dve = &d_v[e * dn..(e + 1) * dn];
            if !self.kept(e) || dve.iter().all(|&g| g == 0.0) {
                continue;
            }
            let (s, t) = edges.edges[e];
            let xe = &tape.x[e * dn..(e + 1) * dn];
            let we = &self.radial.out[e * np * c..(e + 1) * np * c];
            let te = &self.geom.tmat[e * dims.tsize..(e + 1) * dims.tsize];
            dx.fill(0.0);
            for (pi, path) in self.paths.iter().enumerate() {
                let (d1, d3) = (2 * path.l1 + 1, 2 * path.l3 + 1);
                let tm = &te[path.t_off..path.t_off + d1 * d3];
                for ch in 0..c {
                    let w = we[pi * c + ch];
                    let x_off = c * path.l1 * path.l1 + ch * d1;
                    let gv = &dve[c * path.l3 * path.l3 + ch * d3..][..d3];
                    let mut dw = 0.0;
                    for m1 in 0..d1 {
                        let row = &tm[m1 * d3..(m1 + 1) * d3];
                        let tg: f64 = row.iter().zip(gv).map(|(a, b)| a * b).sum();
                        dx[x_off + m1] += w * tg;
                        dw += xe[x_off + m1] * tg;
                    }
                    if let Some((_, dr)) = grads.as_mut() {
                        dr[e * np * c + pi * c + ch] += dw;
                    }
                }
            }
            for j in 0..dn {
                d_adst[t * dn + j] += dx[j];
                d_asrc[s * dn + j] += dx[j];
            }
        }

        // node projections -> normalized features
        let w_dst = self.slots.w_dst.of(p);
        let w_src = self.slots.w_src.of(p);
        let att_dst = self.slots.att_dst.of(p);
        let att_src = self.slots.att_src.of(p);
        let mut d_n = vec![0.0; h.len()];
        for i in 0..n_nodes {
            let r = i * dn..(i + 1) * dn;
            let ni = &tape.n[r.clone()];
            {
                let dw = grads.as_mut().map(|(g, _)| self.slots.w_dst.of_mut(g));
                mix_node_backward(dims, w_dst, ni, &d_adst[r.clone()], &mut d_n[r.clone()], dw);
            }
            {
                let dw = grads.as_mut().map(|(g, _)| self.slots.w_src.of_mut(g));
                mix_node_backward(dims, w_src, ni, &d_asrc[r.clone()], &mut d_n[r.clone()], dw);
            }
            for q in 0..ha {
                let (ga, gb) = (d_pa[i * ha + q], d_pb[i * ha + q]);
                for ch in 0..c {
                    d_n[i * dn + ch] += att_dst[q * c + ch] * ga + att_src[q * c + ch] * gb;
                }
                if let Some((g, _)) = grads.as_mut() {
                    let da = self.slots.att_dst.of_mut(g);
                    for ch in 0..c {
                        da[q * c + ch] += ga * ni[ch];
                    }
                    let ds = self.slots.att_src.of_mut(g);
                    for ch in 0..c {
                        ds[q * c + ch] += gb * ni[ch];
                    }
                }
            }
        }

        // rms norm
        let gain = self.slots.gain.of(p);
        for i in 0..n_nodes {
            let r = tape.rms[i];
            let mut dot = 0.0;
            for l in 0..nl {
                let d = 2 * l + 1;
                let off = i * dn + c * l * l;
                for ch in 0..c {
                    let g = gain[l * c + ch];
                    let mut dg = 0.0;
                    for m in 0..d {
                        let j = off + ch * d + m;
                        dot += g * d_n[j] * h[j];
                        dg += d_n[j] * h[j];
                    }
                    if let Some((gr, _)) = grads.as_mut() {
                        self.slots.gain.of_mut(gr)[l * c + ch] += dg / r;
                    }
                }
            }
            let coef = dot / (r * r * r * dn as f64);
            for l in 0..nl {
                let d = 2 * l + 1;
                let off = i * dn + c * l * l;
                for ch in 0..c {
                    let g = gain[l * c + ch];
                    for m in 0..d {
                        let j = off + ch * d + m;
                        d_h[j] += g * d_n[j] / r - h[j] * coef;
                    }
                }
            }
        }
    }
}
