//! The fixed-point layer `z* = f(z*, x)` built from the trunk layers, its
//! solvers, and inference with fixed-point reuse.

pub mod memory;
mod solver;

pub use solver::{
    anderson_solve, broyden_solve, picard_solve, relative_residual, solve, FixedPointState, SolveOptions,
    SolverConfig, SolverKind, ANDERSON_RIDGE, DIVERGENCE_FACTOR, RESIDUAL_FLOOR,
};

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use memory::FeatureBuf;

use crate::eqnet::{radial_backward, EmbedCache, EqNet, Geometry, LayerTape, RadialCache};
use crate::error::{Error, Result};
use crate::graph::AtomicSystem;
use crate::params::ParamSet;
use crate::vec3::Vec3;

/// Below this norm of `z + x` the injection returns `x` unchanged.
pub const INJECT_DEGENERATE: f64 = 1e-12;

/// `(z + x) ||x|| / ||z + x||` per node (flat norm over the node's block).
pub fn input_inject(z: &[f64], x: &[f64], node_dim: usize) -> Result<Vec<f64>> {
    if z.len() != x.len() || node_dim == 0 || x.len() % node_dim != 0 {
        return Err(Error::LayoutMismatch("injection operands differ in layout".into()));
    }
    let mut y = vec![0.0; x.len()];
    inject_into(z, x, node_dim, &mut y, None);
    Ok(y)
}

fn inject_into(z: &[f64], x: &[f64], dn: usize, y: &mut [f64], mut norms: Option<&mut Vec<(f64, f64)>>) {
    for ((zi, xi), yi) in z.chunks_exact(dn).zip(x.chunks_exact(dn)).zip(y.chunks_exact_mut(dn)) {
        let nx = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ns = zi.iter().zip(xi).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
        if ns < INJECT_DEGENERATE {
            yi.copy_from_slice(xi);
        } else {
            let k = nx / ns;
            for ((o, a), b) in yi.iter_mut().zip(zi).zip(xi) {
                *o = (a + b) * k;
            }
        }
        if let Some(n) = norms.as_deref_mut() {
            n.push((nx, ns));
        }
    }
}

/// Adjoint of the injection: accumulates into `d_z` and `d_x`.
fn inject_backward(z: &[f64], x: &[f64], dn: usize, norms: &[(f64, f64)], dy: &[f64], d_z: &mut [f64], d_x: &mut [f64]) {
    for (i, &(nx, ns)) in norms.iter().enumerate() {
        let r = i * dn..(i + 1) * dn;
        let (zi, xi, gi) = (&z[r.clone()], &x[r.clone()], &dy[r.clone()]);
        if ns < INJECT_DEGENERATE {
            for (a, g) in d_x[r].iter_mut().zip(gi) {
                *a += g;
            }
            continue;
        }
        let s_dot_g: f64 = zi.iter().zip(xi).zip(gi).map(|((a, b), g)| (a + b) * g).sum();
        let k = nx / ns;
        let proj = s_dot_g / (ns * ns);
        let xk = if nx > 0.0 { s_dot_g / (ns * nx) } else { 0.0 };
        for j in 0..dn {
            let s = zi[j] + xi[j];
            let ds = k * (gi[j] - s * proj);
            d_z[r.start + j] += ds;
            d_x[r.start + j] += ds + xk * xi[j];
        }
    }
}

/// Per-edge keep flags with drop probability `rate`; `None` when `rate` is 0.
pub fn sample_dropout_mask<R: Rng + ?Sized>(n_edges: usize, rate: f64, rng: &mut R) -> Option<Vec<bool>> {
    (rate > 0.0).then(|| (0..n_edges).map(|_| rng.gen::<f64>() >= rate).collect())
}

/// Everything fixed during one solve: geometry, injection, radial weights
/// and the dropout mask.
pub struct DeqContext<'a> {
    pub net: &'a EqNet,
    pub params: &'a ParamSet,
    pub geom: Geometry,
    x: Vec<f64>,
    embed_cache: EmbedCache,
    radials: Vec<RadialCache>,
    force_radial: RadialCache,
    mask: Option<Vec<bool>>,
}

/// Linearization of the map at one point.
#[derive(Debug, Clone)]
pub struct MapTape {
    z: FeatureBuf,
    norms: Vec<(f64, f64)>,
    inputs: Vec<FeatureBuf>,
    layers: Vec<LayerTape>,
    pub output: FeatureBuf,
}

/// Linearization of the heads at one point.
#[derive(Debug, Clone)]
pub struct HeadTape {
    hf: Vec<f64>,
    layer: LayerTape,
}

impl<'a> DeqContext<'a> {
    pub fn new(net: &'a EqNet, params: &'a ParamSet, system: &AtomicSystem, mask: Option<Vec<bool>>) -> Result<Self> {
        params.check_layout(net.param_specs())?;
        let geom = net.geometry(system)?;
        Self::with_geometry(net, params, geom, mask)
    }

    pub fn with_geometry(net: &'a EqNet, params: &'a ParamSet, geom: Geometry, mask: Option<Vec<bool>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.len() != geom.edges.len() {
                return Err(Error::LayoutMismatch("dropout mask length does not match edges".into()));
            }
        }
        let p = &params.data;
        let (x, embed_cache) = net.embed_forward(p, &geom);
        let radials = net.layers.iter().map(|s| net.layer_radial(s, p, &geom)).collect();
        let force_radial = net.layer_radial(&net.force, p, &geom);
        Ok(Self {
            net,
            params,
            geom,
            x,
            embed_cache,
            radials,
            force_radial,
            mask,
        })
    }

    /// Flat length of `z`.
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn node_dim(&self) -> usize {
        self.net.node_dim()
    }

    pub fn injection(&self) -> &[f64] {
        &self.x
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// `f(z) = layers(inject(z, x))`.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        let mut h = vec![0.0; z.len()];
        inject_into(z, &self.x, self.node_dim(), &mut h, None);
        let p = &self.params.data;
        for (slots, radial) in self.net.layers.iter().zip(&self.radials) {
            h = self.net.layer_ctx(slots, p, &self.geom, radial, self.mask.as_deref()).forward(&h, None);
        }
        out.copy_from_slice(&h);
    }

    pub fn apply_vec(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.apply(z, &mut out);
        out
    }

    pub fn linearize(&self, z: &[f64]) -> MapTape {
        let mut h = vec![0.0; z.len()];
        let mut norms = Vec::with_capacity(self.geom.num_nodes());
        inject_into(z, &self.x, self.node_dim(), &mut h, Some(&mut norms));
        let p = &self.params.data;
        let mut inputs = Vec::with_capacity(self.radials.len());
        let mut layers = Vec::with_capacity(self.radials.len());
        for (slots, radial) in self.net.layers.iter().zip(&self.radials) {
            let mut tape = LayerTape::default();
            let next = self
                .net
                .layer_ctx(slots, p, &self.geom, radial, self.mask.as_deref())
                .forward(&h, Some(&mut tape));
            inputs.push(FeatureBuf::from_vec(std::mem::replace(&mut h, next)));
            layers.push(tape);
        }
        MapTape {
            z: FeatureBuf::from_slice(z),
            norms,
            inputs,
            layers,
            output: FeatureBuf::from_vec(h),
        }
    }

    /// Back through the map: `d_z += u df/dz` and, when given,
    /// `grads += u df/dtheta` (trunk, radial and embedding parameters).
    pub fn vjp(&self, tape: &MapTape, u: &[f64], d_z: Option<&mut [f64]>, mut grads: Option<&mut [f64]>) {
        let p = &self.params.data;
        let mut d = u.to_vec();
        for (k, slots) in self.net.layers.iter().enumerate().rev() {
            let radial = &self.radials[k];
            let ctx = self.net.layer_ctx(slots, p, &self.geom, radial, self.mask.as_deref());
            let mut d_in = vec![0.0; d.len()];
            match grads.as_deref_mut() {
                Some(g) => {
                    let mut d_rad = vec![0.0; radial.out.len()];
                    ctx.backward(&tape.inputs[k], &tape.layers[k], &d, &mut d_in, Some((&mut *g, &mut d_rad)));
                    radial_backward(&slots.radial, p, &self.geom.rbf, &self.geom.env, radial, &d_rad, g);
                }
                None => ctx.backward(&tape.inputs[k], &tape.layers[k], &d, &mut d_in, None),
            }
            d = d_in;
        }
        let mut dz_local = vec![0.0; d.len()];
        let mut d_x = vec![0.0; d.len()];
        inject_backward(&tape.z, &self.x, self.node_dim(), &tape.norms, &d, &mut dz_local, &mut d_x);
        if let Some(dz) = d_z {
            for (a, b) in dz.iter_mut().zip(&dz_local) {
                *a += b;
            }
        }
        if let Some(g) = grads {
            self.net.embed_backward(p, &self.geom, &self.embed_cache, &d_x, g);
        }
    }

    /// Energy and forces read from `z`.
    pub fn heads(&self, z: &[f64]) -> (f64, Vec<Vec3>) {
        let p = &self.params.data;
        let (f, _) = self.net.force_forward(p, &self.geom, &self.force_radial, z, None);
        (self.net.energy_forward(p, z), f)
    }

    pub fn heads_taped(&self, z: &[f64]) -> (f64, Vec<Vec3>, HeadTape) {
        let p = &self.params.data;
        let mut layer = LayerTape::default();
        let (f, hf) = self.net.force_forward(p, &self.geom, &self.force_radial, z, Some(&mut layer));
        (self.net.energy_forward(p, z), f, HeadTape { hf, layer })
    }

    /// Back through both heads: `d_z += ...`, head parameters into `grads`.
    pub fn heads_vjp(&self, z: &[f64], tape: &HeadTape, d_e: f64, d_f: &[Vec3], d_z: &mut [f64], mut grads: Option<&mut [f64]>) {
        let p = &self.params.data;
        self.net.energy_backward(p, z, d_e, d_z, grads.as_deref_mut());
        self.net
            .force_backward(p, &self.geom, &self.force_radial, z, &tape.hf, &tape.layer, d_f, d_z, grads);
    }

    /// Runs the configured solver from `z0`.
    pub fn solve(&self, z0: &[f64], cfg: &SolverConfig, tolerance: f64, samples: usize) -> Result<FixedPointState> {
        let opts = SolveOptions {
            tolerance,
            max_steps: cfg.max_steps,
            samples,
            min_steps: 0,
        };
        self.solve_with(z0, cfg, &opts)
    }

    pub fn solve_with(&self, z0: &[f64], cfg: &SolverConfig, opts: &SolveOptions) -> Result<FixedPointState> {
        solve(|z, out| self.apply(z, out), z0, cfg, opts)
    }
}

/// Solver statistics of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub steps: usize,
    pub evals: usize,
    pub residual: f64,
    pub converged: bool,
    pub tolerance: f64,
    pub reused: bool,
    pub trace: Vec<f64>,
    pub wall_time: f64,
}

impl SolveStats {
    pub fn from_state(s: &FixedPointState, reused: bool) -> Self {
        Self {
            steps: s.steps,
            evals: s.evals,
            residual: s.residual,
            converged: s.converged,
            tolerance: s.tolerance,
            reused,
            trace: s.trace.clone(),
            wall_time: s.wall_time,
        }
    }

    /// `step,residual` rows, one per map evaluation.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,residual")?;
        for (i, r) in self.trace.iter().enumerate() {
            writeln!(w, "{i},{r:e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DeqOutput {
    pub energy: f64,
    pub forces: Vec<Vec3>,
    pub z: Vec<f64>,
    pub stats: SolveStats,
}

/// Inference. Without `reuse` (or when it does not fit the system) the
/// solve starts from zero at `eps_train`; with it, from the previous fixed
/// point at `eps_reuse` and at least `reuse_min_steps` updates. Unconverged
/// solves are returned with the flag unset.
pub fn deq_forward(
    net: &EqNet,
    params: &ParamSet,
    system: &AtomicSystem,
    cfg: &SolverConfig,
    reuse: Option<&[f64]>,
) -> Result<DeqOutput> {
    let ctx = DeqContext::new(net, params, system, None)?;
    deq_forward_ctx(&ctx, cfg, reuse)
}

pub fn deq_forward_ctx(ctx: &DeqContext<'_>, cfg: &SolverConfig, reuse: Option<&[f64]>) -> Result<DeqOutput> {
    cfg.validate()?;
    let n = ctx.dim();
    let warm = match reuse {
        Some(z) if z.len() == n => Some(z),
        Some(z) => {
            log::info!("reuse state has length {} but the system needs {n}; starting from zero", z.len());
            None
        }
        None => None,
    };
    let zeros;
    let (z0, tol, min_steps) = match warm {
        Some(z) => (z, cfg.eps_reuse, cfg.reuse_min_steps),
        None => {
            zeros = vec![0.0; n];
            (&zeros[..], cfg.eps_train, 0)
        }
    };
    let opts = SolveOptions {
        tolerance: tol,
        max_steps: cfg.max_steps,
        samples: 0,
        min_steps,
    };
    let state = ctx.solve_with(z0, cfg, &opts)?;
    if !state.converged {
        log::warn!(
            "fixed-point solve stopped at {} steps with residual {:.3e} (tolerance {:.1e})",
            state.steps,
            state.residual,
            tol
        );
    }
    let stats = SolveStats::from_state(&state, warm.is_some());
    let z = state.z.into_vec();
    let (energy, forces) = ctx.heads(&z);
    Ok(DeqOutput {
        energy,
        forces,
        z,
        stats,
    })
}
