//! The equivariant network: embedding block, graph-attention layers, energy
//! and force heads, and an explicit layer stack.
//!
//! Node features use the uniform layout `channels x (l = 0..=l_max)`; see
//! [`crate::irreps::IrrepsLayout::uniform`]. All geometry-only quantities
//! (harmonics, radial bases, coupling matrices) are computed once per system
//! in [`Geometry`].

mod layer;
mod radial;

pub(crate) use layer::{LayerCtx, LayerSlots, LayerTape};
pub(crate) use radial::{radial_backward, radial_forward, silu, silu_grad, RadialCache, RadialSlots};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_neighbor_list, envelope, AtomicSystem, EdgeList, RadialBasis};
use crate::irreps::{cartesian_to_l1, l1_to_cartesian, sh_flat, triangle, CgPath, IrrepsLayout, MAX_DEGREE};
use crate::params::{Init, ParamBuilder, ParamSet, ParamSpec, Slot};
use crate::vec3::{norm, scale, Vec3};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub l_max: usize,
    pub channels: usize,
    pub heads: usize,
    pub attn_hidden: usize,
    pub radial_hidden: usize,
    pub energy_hidden: usize,
    pub num_basis: usize,
    pub r_cut: f64,
    pub max_neighbors: usize,
    pub max_atomic_number: u32,
    /// Trunk layers: applied once each inside the fixed-point map, or
    /// stacked for the explicit model.
    pub layers: usize,
    /// Recurrent path-dropout rate on edges (training only).
    pub path_dropout: f64,
    /// Expected neighbors per atom, used to initialize the embedding scale.
    pub avg_degree: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            l_max: 2,
            channels: 8,
            heads: 1,
            attn_hidden: 8,
            radial_hidden: 16,
            energy_hidden: 16,
            num_basis: 8,
            r_cut: 5.0,
            max_neighbors: 32,
            max_atomic_number: 10,
            layers: 1,
            path_dropout: 0.0,
            avg_degree: 8.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.l_max > MAX_DEGREE {
            return Err(Error::DegreeTooHigh {
                requested: self.l_max,
                max: MAX_DEGREE,
            });
        }
        if self.channels == 0 || self.heads == 0 || self.attn_hidden == 0 || self.radial_hidden == 0 {
            return bad("widths must be positive");
        }
        if self.energy_hidden == 0 || self.layers == 0 || self.max_atomic_number == 0 {
            return bad("energy_hidden, layers and max_atomic_number must be positive");
        }
        if self.channels % self.heads != 0 {
            return bad("channels must be divisible by heads");
        }
        if self.num_basis < 2 || !(self.r_cut > 0.0) || self.max_neighbors == 0 {
            return bad("invalid graph settings");
        }
        if !(0.0..1.0).contains(&self.path_dropout) {
            return bad("path_dropout must be in [0, 1)");
        }
        if !(self.avg_degree > 0.0) {
            return bad("avg_degree must be positive");
        }
        Ok(())
    }

    pub fn layout(&self) -> IrrepsLayout {
        IrrepsLayout::uniform(self.l_max, self.channels).expect("validated config")
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dims {
    pub l_max: usize,
    pub c: usize,
    pub d: usize,
    pub heads: usize,
    pub attn: usize,
    pub n_paths: usize,
    pub nsh: usize,
    pub tsize: usize,
}

/// A coupling path `(x^{l1} ⊗ Y^{l2}) -> l3` with its slot in the per-edge
/// coupling matrices.
#[derive(Debug, Clone)]
pub(crate) struct MsgPath {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    pub t_off: usize,
    pub cg: Arc<CgPath>,
}

/// Per-system edge geometry shared by every layer.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub edges: EdgeList,
    pub(crate) species: Vec<usize>,
    pub(crate) sh: Vec<f64>,
    pub(crate) rbf: Vec<f64>,
    pub(crate) env: Vec<f64>,
    /// Per edge and path: `T[m1][m3] = sum_m2 C[m1][m2][m3] Y^{l2}_{m2}`.
    pub(crate) tmat: Vec<f64>,
}

impl Geometry {
    pub fn num_nodes(&self) -> usize {
        self.species.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EmbedSlots {
    pub table: Slot,
    pub alpha: Slot,
    pub radial: RadialSlots,
}

#[derive(Debug, Clone)]
pub(crate) struct EnergySlots {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

/// Network structure: layout, coupling paths and parameter slots. Parameter
/// values live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct EqNet {
    pub cfg: ModelConfig,
    pub(crate) dims: Dims,
    pub(crate) paths: Vec<MsgPath>,
    pub(crate) basis: RadialBasis,
    pub(crate) embed: EmbedSlots,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) force: LayerSlots,
    pub(crate) force_out: Slot,
    pub(crate) energy: EnergySlots,
    specs: Vec<ParamSpec>,
}

/// Embedding intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct EmbedCache {
    pub radial: RadialCache,
    /// Unscaled neighbor sum `u_t`, `N x D`.
    pub u: Vec<f64>,
}

impl EqNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let l_max = cfg.l_max;
        let c = cfg.channels;
        let mut paths = Vec::new();
        let mut t_off = 0;
        for l1 in 0..=l_max {
            for l2 in 0..=l_max {
                for l3 in 0..=l_max {
                    if triangle(l1, l2, l3) {
                        paths.push(MsgPath {
                            l1,
                            l2,
                            l3,
                            t_off,
                            cg: crate::irreps::clebsch_gordan(l1, l2, l3)?,
                        });
                        t_off += (2 * l1 + 1) * (2 * l3 + 1);
                    }
                }
            }
        }
        let dims = Dims {
            l_max,
            c,
            d: c * (l_max + 1) * (l_max + 1),
            heads: cfg.heads,
            attn: cfg.attn_hidden,
            n_paths: paths.len(),
            nsh: (l_max + 1) * (l_max + 1),
            tsize: t_off,
        };
        let basis = RadialBasis::new(cfg.num_basis, cfg.r_cut)?;
        let mut b = ParamBuilder::default();
        let (embed, layers, force, force_out, energy) = Self::register_all(&mut b, &cfg, &dims);
        let specs = b.specs().to_vec();
        Ok(Self {
            cfg,
            dims,
            paths,
            basis,
            embed,
            layers,
            force,
            force_out,
            energy,
            specs,
        })
    }

    pub fn layout(&self) -> IrrepsLayout {
        self.cfg.layout()
    }

    /// Flat feature dimension per node.
    pub fn node_dim(&self) -> usize {
        self.dims.d
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(|s| s.len()).sum()
    }

    /// Fresh parameters: uniform(-a, a), a = sqrt(1/fan_in); norm gains 1;
    /// embedding scale 1/sqrt(avg_degree).
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut b = ParamBuilder::default();
        Self::register_all(&mut b, &self.cfg, &self.dims);
        b.build(rng)
    }

    fn register_all(b: &mut ParamBuilder, cfg: &ModelConfig, dims: &Dims) -> (EmbedSlots, Vec<LayerSlots>, LayerSlots, Slot, EnergySlots) {
        let c = cfg.channels;
        let embed = EmbedSlots {
            table: b.add("embed.table", &[cfg.max_atomic_number as usize, c], Init::FanIn(1)),
            alpha: b.add("embed.alpha", &[1], Init::Const(1.0 / cfg.avg_degree.sqrt())),
            radial: RadialSlots::register(b, "embed.radial", cfg.num_basis, cfg.radial_hidden, (cfg.l_max + 1) * c),
        };
        let layers = (0..cfg.layers)
            .map(|i| LayerSlots::register(b, &format!("layer{i}"), dims, cfg.num_basis, cfg.radial_hidden))
            .collect();
        let force = LayerSlots::register(b, "force.layer", dims, cfg.num_basis, cfg.radial_hidden);
        let force_out = b.add("force.out", &[c], Init::FanIn(c));
        let he = cfg.energy_hidden;
        let energy = EnergySlots {
            w1: b.add("energy.w1", &[he, c], Init::FanIn(c)),
            b1: b.add("energy.b1", &[he], Init::FanIn(c)),
            w2: b.add("energy.w2", &[he], Init::FanIn(he)),
            b2: b.add("energy.b2", &[1], Init::Const(0.0)),
        };
        (embed, layers, force, force_out, energy)
    }

    /// Neighbor list plus every geometry-only per-edge quantity.
    pub fn geometry(&self, system: &AtomicSystem) -> Result<Geometry> {
        system.validate()?;
        let edges = build_neighbor_list(system, self.cfg.r_cut, self.cfg.max_neighbors)?;
        let species = system
            .atomic_numbers
            .iter()
            .map(|&z| {
                if z > self.cfg.max_atomic_number {
                    Err(Error::OutOfRange(format!(
                        "atomic number {z} exceeds model maximum {}",
                        self.cfg.max_atomic_number
                    )))
                } else {
                    Ok(z as usize - 1)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (nsh, nb, ts) = (self.dims.nsh, self.cfg.num_basis, self.dims.tsize);
        let ne = edges.len();
        let mut sh = vec![0.0; ne * nsh];
        let mut rbf = vec![0.0; ne * nb];
        let mut env = vec![0.0; ne];
        let mut tmat = vec![0.0; ne * ts];
        for e in 0..ne {
            let d = edges.dist[e];
            let u = scale(edges.r_vec[e], 1.0 / d);
            let y = &mut sh[e * nsh..(e + 1) * nsh];
            sh_flat(self.cfg.l_max, u, y);
            self.basis.eval_into(d, &mut rbf[e * nb..(e + 1) * nb]);
            env[e] = envelope(d, self.cfg.r_cut);
            let te = &mut tmat[e * ts..(e + 1) * ts];
            for p in &self.paths {
                let (d1, d2, d3) = p.cg.dims();
                let y2 = &y[p.l2 * p.l2..p.l2 * p.l2 + d2];
                for m1 in 0..d1 {
                    for m3 in 0..d3 {
                        te[p.t_off + m1 * d3 + m3] = (0..d2).map(|m2| p.cg.get(m1, m2, m3) * y2[m2]).sum();
                    }
                }
            }
        }
        Ok(Geometry {
            edges,
            species,
            sh,
            rbf,
            env,
            tmat,
        })
    }

    pub(crate) fn layer_radial(&self, slots: &LayerSlots, params: &[f64], geom: &Geometry) -> RadialCache {
        radial_forward(&slots.radial, params, &geom.rbf, &geom.env)
    }

    pub(crate) fn layer_ctx<'a>(
        &'a self,
        slots: &'a LayerSlots,
        params: &'a [f64],
        geom: &'a Geometry,
        radial: &'a RadialCache,
        mask: Option<&'a [bool]>,
    ) -> LayerCtx<'a> {
        LayerCtx {
            dims: &self.dims,
            paths: &self.paths,
            geom,
            params,
            slots,
            radial,
            mask,
        }
    }

    /// Embedding block: `x_t = linear(onehot(z_t)) + alpha sum_s v(1, 1, r_ts)`.
    /// The constant input is a single scalar channel equal to one, so the
    /// message reduces to radial weights times `Y^l(r_ts)` on the `(0,l,l)`
    /// paths.
    pub(crate) fn embed_forward(&self, params: &[f64], geom: &Geometry) -> (Vec<f64>, EmbedCache) {
        let (c, dn, nsh) = (self.dims.c, self.dims.d, self.dims.nsh);
        let n = geom.num_nodes();
        let radial = radial_forward(&self.embed.radial, params, &geom.rbf, &geom.env);
        let mut u = vec![0.0; n * dn];
        for e in 0..geom.edges.len() {
            let t = geom.edges.edges[e].1;
            let w = &radial.out[e * (self.dims.l_max + 1) * c..];
            let y = &geom.sh[e * nsh..(e + 1) * nsh];
            for l in 0..=self.dims.l_max {
                let d = 2 * l + 1;
                for ch in 0..c {
                    let wv = w[l * c + ch];
                    let off = t * dn + c * l * l + ch * d;
                    for m in 0..d {
                        u[off + m] += wv * y[l * l + m];
                    }
                }
            }
        }
        let alpha = self.embed.alpha.of(params)[0];
        let table = self.embed.table.of(params);
        let mut x = vec![0.0; n * dn];
        for i in 0..n {
            for j in 0..dn {
                x[i * dn + j] = alpha * u[i * dn + j];
            }
            let sp = geom.species[i];
            for ch in 0..c {
                x[i * dn + ch] += table[sp * c + ch];
            }
        }
        (x, EmbedCache { radial, u })
    }

    pub(crate) fn embed_backward(&self, params: &[f64], geom: &Geometry, cache: &EmbedCache, d_x: &[f64], grads: &mut [f64]) {
        let (c, dn, nsh) = (self.dims.c, self.dims.d, self.dims.nsh);
        let n = geom.num_nodes();
        let alpha = self.embed.alpha.of(params)[0];
        {
            let table = self.embed.table.of_mut(grads);
            for i in 0..n {
                let sp = geom.species[i];
                for ch in 0..c {
                    table[sp * c + ch] += d_x[i * dn + ch];
                }
            }
        }
        self.embed.alpha.of_mut(grads)[0] += d_x.iter().zip(&cache.u).map(|(a, b)| a * b).sum::<f64>();
        let no = (self.dims.l_max + 1) * c;
        let mut d_w = vec![0.0; geom.edges.len() * no];
        for e in 0..geom.edges.len() {
            let t = geom.edges.edges[e].1;
            let y = &geom.sh[e * nsh..(e + 1) * nsh];
            for l in 0..=self.dims.l_max {
                let d = 2 * l + 1;
                for ch in 0..c {
                    let off = t * dn + c * l * l + ch * d;
                    d_w[e * no + l * c + ch] = alpha * (0..d).map(|m| d_x[off + m] * y[l * l + m]).sum::<f64>();
                }
            }
        }
        radial_backward(&self.embed.radial, params, &geom.rbf, &geom.env, &cache.radial, &d_w, grads);
    }

    /// `E = sum_i MLP(h^0_i)`.
    pub(crate) fn energy_forward(&self, params: &[f64], h: &[f64]) -> f64 {
        let (c, dn) = (self.dims.c, self.dims.d);
        let he = self.cfg.energy_hidden;
        let (w1, b1, w2, b2) = (
            self.energy.w1.of(params),
            self.energy.b1.of(params),
            self.energy.w2.of(params),
            self.energy.b2.of(params)[0],
        );
        let mut total = 0.0;
        for node in h.chunks_exact(dn) {
            let s = &node[..c];
            let mut e = b2;
            for j in 0..he {
                let pre = b1[j] + (0..c).map(|k| w1[j * c + k] * s[k]).sum::<f64>();
                e += w2[j] * silu(pre);
            }
            total += e;
        }
        total
    }

    pub(crate) fn energy_backward(&self, params: &[f64], h: &[f64], d_e: f64, d_h: &mut [f64], grads: Option<&mut [f64]>) {
        let (c, dn) = (self.dims.c, self.dims.d);
        let he = self.cfg.energy_hidden;
        let (w1, b1, w2) = (
            self.energy.w1.of(params).to_vec(),
            self.energy.b1.of(params),
            self.energy.w2.of(params).to_vec(),
        );
        let mut grads = grads;
        for (i, node) in h.chunks_exact(dn).enumerate() {
            let s = &node[..c];
            for j in 0..he {
                let pre = b1[j] + (0..c).map(|k| w1[j * c + k] * s[k]).sum::<f64>();
                let dpre = d_e * w2[j] * silu_grad(pre);
                for k in 0..c {
                    d_h[i * dn + k] += dpre * w1[j * c + k];
                }
                if let Some(g) = grads.as_deref_mut() {
                    self.energy.w2.of_mut(g)[j] += d_e * silu(pre);
                    self.energy.b1.of_mut(g)[j] += dpre;
                    let gw1 = self.energy.w1.of_mut(g);
                    for k in 0..c {
                        gw1[j * c + k] += dpre * s[k];
                    }
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                self.energy.b2.of_mut(g)[0] += d_e;
            }
        }
    }

    /// Extra attention layer, then the degree-1 block read out with one
    /// weight per channel and mapped to Cartesian.
    pub(crate) fn force_forward(&self, params: &[f64], geom: &Geometry, radial: &RadialCache, h: &[f64], tape: Option<&mut LayerTape>) -> (Vec<Vec3>, Vec<f64>) {
        let ctx = self.layer_ctx(&self.force, params, geom, radial, None);
        let hf = ctx.forward(h, tape);
        (self.force_readout(params, &hf), hf)
    }

    fn force_readout(&self, params: &[f64], hf: &[f64]) -> Vec<Vec3> {
        let (c, dn) = (self.dims.c, self.dims.d);
        let wf = self.force_out.of(params);
        hf.chunks_exact(dn)
            .map(|node| {
                let mut comp = [0.0; 3];
                if self.dims.l_max >= 1 {
                    for ch in 0..c {
                        for m in 0..3 {
                            comp[m] += wf[ch] * node[c + ch * 3 + m];
                        }
                    }
                }
                l1_to_cartesian(&comp)
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn force_backward(
        &self,
        params: &[f64],
        geom: &Geometry,
        radial: &RadialCache,
        h: &[f64],
        hf: &[f64],
        tape: &LayerTape,
        d_f: &[Vec3],
        d_h: &mut [f64],
        grads: Option<&mut [f64]>,
    ) {
        let (c, dn) = (self.dims.c, self.dims.d);
        let n = h.len() / dn;
        let mut d_hf = vec![0.0; h.len()];
        let wf = self.force_out.of(params).to_vec();
        let mut d_wf = vec![0.0; c];
        if self.dims.l_max >= 1 {
            for i in 0..n {
                let g = cartesian_to_l1(d_f[i]);
                for ch in 0..c {
                    for m in 0..3 {
                        let j = i * dn + c + ch * 3 + m;
                        d_hf[j] += wf[ch] * g[m];
                        d_wf[ch] += g[m] * hf[j];
                    }
                }
            }
        }
        let ctx = self.layer_ctx(&self.force, params, geom, radial, None);
        match grads {
            Some(g) => {
                for (a, b) in self.force_out.of_mut(g).iter_mut().zip(&d_wf) {
                    *a += b;
                }
                let mut d_rad = vec![0.0; radial.out.len()];
                ctx.backward(h, tape, &d_hf, d_h, Some((&mut *g, &mut d_rad)));
                radial_backward(&self.force.radial, params, &geom.rbf, &geom.env, radial, &d_rad, g);
            }
            None => ctx.backward(h, tape, &d_hf, d_h, None),
        }
    }

    /// Energy and forces from final node features `h`.
    pub fn heads(&self, params: &ParamSet, geom: &Geometry, h: &[f64]) -> (f64, Vec<Vec3>) {
        let p = &params.data;
        let radial = self.layer_radial(&self.force, p, geom);
        let (f, _) = self.force_forward(p, geom, &radial, h, None);
        (self.energy_forward(p, h), f)
    }

    /// Embedding, then every trunk layer once in sequence (untied weights).
    pub fn explicit_forward(&self, params: &ParamSet, system: &AtomicSystem) -> Result<(f64, Vec<Vec3>)> {
        let geom = self.geometry(system)?;
        let p = &params.data;
        let (mut h, _) = self.embed_forward(p, &geom);
        for slots in &self.layers {
            let radial = self.layer_radial(slots, p, &geom);
            h = self.layer_ctx(slots, p, &geom, &radial, None).forward(&h, None);
        }
        Ok(self.heads(params, &geom, &h))
    }

    /// Injection features `x_tilde` for every node.
    pub fn embed(&self, params: &ParamSet, geom: &Geometry) -> Vec<f64> {
        self.embed_forward(&params.data, geom).0
    }

    /// One trunk layer (`layer` indexes the trunk) applied to `h`.
    pub fn attention_layer(&self, params: &ParamSet, geom: &Geometry, layer: usize, h: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
        let slots = self.layers.get(layer).ok_or_else(|| Error::OutOfRange(format!("no layer {layer}")))?;
        if h.len() != geom.num_nodes() * self.dims.d {
            return Err(Error::LayoutMismatch("feature length does not match the graph".into()));
        }
        if let Some(m) = mask {
            if m.len() != geom.edges.len() {
                return Err(Error::LayoutMismatch("dropout mask length does not match edges".into()));
            }
        }
        let radial = self.layer_radial(slots, &params.data, geom);
        Ok(self.layer_ctx(slots, &params.data, geom, &radial, mask).forward(h, None))
    }

    /// Attention weights of a trunk layer, `E x heads`.
    pub fn attention_weights(&self, params: &ParamSet, geom: &Geometry, layer: usize, h: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
        let slots = self.layers.get(layer).ok_or_else(|| Error::OutOfRange(format!("no layer {layer}")))?;
        let radial = self.layer_radial(slots, &params.data, geom);
        let mut tape = LayerTape::default();
        self.layer_ctx(slots, &params.data, geom, &radial, mask).forward(h, Some(&mut tape));
        Ok(tape.a)
    }

    pub fn energy_head(&self, params: &ParamSet, h: &[f64]) -> f64 {
        self.energy_forward(&params.data, h)
    }

    pub fn force_head(&self, params: &ParamSet, geom: &Geometry, h: &[f64]) -> Vec<Vec3> {
        let radial = self.layer_radial(&self.force, &params.data, geom);
        self.force_forward(&params.data, geom, &radial, h, None).0
    }
}

/// Largest per-atom force norm.
pub fn max_force(forces: &[Vec3]) -> f64 {
    forces.iter().map(|&f| norm(f)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
