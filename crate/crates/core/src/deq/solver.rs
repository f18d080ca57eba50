//! Fixed-point solvers over flat feature vectors.
//!
//! All solvers share one contract: `steps` counts solver updates, `evals`
//! counts map evaluations, and the returned iterate is always the one whose
//! residual `||f(z) - z|| / max(||z||, 1e-8)` was measured last.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::memory::FeatureBuf;
use crate::error::{Error, Result};

pub const RESIDUAL_FLOOR: f64 = 1e-8;
/// Relative ridge added to the Anderson normal equations.
pub const ANDERSON_RIDGE: f64 = 1e-8;
/// Growth of `||f(z)||` or `||f(z) - z||` over the scale of the first
/// evaluation that is treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Anderson,
    Broyden,
    Picard,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anderson" => Ok(Self::Anderson),
            "broyden" => Ok(Self::Broyden),
            "picard" => Ok(Self::Picard),
            _ => Err(Error::Config(format!("unknown solver '{s}'"))),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Anderson => "anderson",
            Self::Broyden => "broyden",
            Self::Picard => "picard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub solver: SolverKind,
    pub eps_train: f64,
    pub eps_reuse: f64,
    pub max_steps: usize,
    pub memory: usize,
    pub mixing: f64,
    pub correction_samples: usize,
    /// Updates always taken after a warm start, so a reused fixed point is
    /// refreshed even when it already meets `eps_reuse`.
    pub reuse_min_steps: usize,
    /// Rank of the Broyden inverse-Jacobian update before it restarts.
    pub broyden_rank: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Anderson,
            eps_train: 1e-4,
            eps_reuse: 1e-1,
            max_steps: 40,
            memory: 5,
            mixing: 1.0,
            correction_samples: 3,
            reuse_min_steps: 3,
            broyden_rank: 32,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_train > 0.0 && self.eps_train <= self.eps_reuse) {
            return Err(Error::Config("need 0 < eps_train <= eps_reuse".into()));
        }
        if self.max_steps == 0 || self.memory == 0 || self.broyden_rank == 0 {
            return Err(Error::Config("max_steps, memory and broyden_rank must be >= 1".into()));
        }
        if !(self.mixing > 0.0 && self.mixing <= 1.0) {
            return Err(Error::Config("mixing must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Result of one solve.
#[derive(Debug, Clone)]
pub struct FixedPointState {
    pub z: FeatureBuf,
    pub steps: usize,
    pub evals: usize,
    pub residual: f64,
    pub converged: bool,
    pub tolerance: f64,
    /// Relative residual after every evaluation.
    pub trace: Vec<f64>,
    /// Intermediate iterates kept for the correction loss.
    pub sampled: Vec<FeatureBuf>,
    pub wall_time: f64,
}

/// Per-solve options that are not part of the configuration.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tolerance: f64,
    pub max_steps: usize,
    /// Number of intermediates to record (0 outside training).
    pub samples: usize,
    /// Updates taken before the tolerance is allowed to stop the solve.
    pub min_steps: usize,
}

pub fn relative_residual(z: &[f64], fz: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in z.iter().zip(fz) {
        num += (b - a) * (b - a);
        den += a * a;
    }
    num.sqrt() / den.sqrt().max(RESIDUAL_FLOOR)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn abs_residual(z: &[f64], fz: &[f64]) -> f64 {
    z.iter().zip(fz).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
}

/// Shared bookkeeping: residual trace, divergence test and correction
/// samples taken when the residual first crosses geometric milestones
/// between the first residual and the tolerance.
struct Monitor {
    tol: f64,
    samples: usize,
    taken: usize,
    first_rel: f64,
    scale: f64,
    trace: Vec<f64>,
    sampled: Vec<FeatureBuf>,
}

impl Monitor {
    fn new(opts: &SolveOptions) -> Self {
        Self {
            tol: opts.tolerance,
            samples: opts.samples,
            taken: 0,
            first_rel: f64::NAN,
            scale: f64::NAN,
            trace: Vec::new(),
            sampled: Vec::with_capacity(opts.samples),
        }
    }

    fn observe(&mut self, step: usize, z: &[f64], fz: &[f64]) -> Result<f64> {
        let r = relative_residual(z, fz);
        let a = abs_residual(z, fz);
        let nf = norm(fz);
        self.trace.push(r);
        if !r.is_finite() || !a.is_finite() || !nf.is_finite() {
            return Err(Error::Diverged { step, residual: r });
        }
        if self.trace.len() == 1 {
            self.first_rel = r;
            self.scale = norm(z).max(nf).max(f64::MIN_POSITIVE);
        } else if a.max(nf) > DIVERGENCE_FACTOR * self.scale {
            return Err(Error::Diverged { step, residual: r });
        }
        if self.taken < self.samples && self.trace.len() > 1 && self.first_rel > self.tol && r > self.tol {
            let k = (self.taken + 1) as f64 / (self.samples + 1) as f64;
            let milestone = self.first_rel * (k * (self.tol / self.first_rel).ln()).exp();
            if r <= milestone {
                self.sampled.push(FeatureBuf::from_slice(z));
                self.taken += 1;
            }
        }
        Ok(r)
    }

    fn finish(self, z: FeatureBuf, steps: usize, residual: f64, start: Instant) -> FixedPointState {
        FixedPointState {
            z,
            steps,
            evals: self.trace.len(),
            residual,
            converged: residual < self.tol,
            tolerance: self.tol,
            trace: self.trace,
            sampled: self.sampled,
            wall_time: start.elapsed().as_secs_f64(),
        }
    }
}

/// Plain iteration `z <- f(z)`.
pub fn picard_solve<F>(mut f: F, z0: &[f64], opts: &SolveOptions) -> Result<FixedPointState>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let start = Instant::now();
    let mut mon = Monitor::new(opts);
    let mut z = FeatureBuf::from_slice(z0);
    let mut fz = FeatureBuf::zeros(z0.len());
    let mut steps = 0;
    loop {
        f(&z, &mut fz);
        let r = mon.observe(steps, &z, &fz)?;
        if (r < opts.tolerance && steps >= opts.min_steps) || steps >= opts.max_steps {
            return Ok(mon.finish(z, steps, r, start));
        }
        std::mem::swap(&mut z, &mut fz);
        steps += 1;
    }
}

/// Anderson acceleration with memory `m` and mixing `beta`:
/// `z <- beta sum_j a_j f(z_j) + (1 - beta) sum_j a_j z_j`, where `a`
/// minimizes `||sum_j a_j (f(z_j) - z_j)||` subject to `sum_j a_j = 1`.
/// The history lives in a fixed ring of `m` slots.
pub fn anderson_solve<F>(mut f: F, z0: &[f64], m: usize, beta: f64, opts: &SolveOptions) -> Result<FixedPointState>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let start = Instant::now();
    let n = z0.len();
    let m = m.max(1);
    let mut mon = Monitor::new(opts);
    let mut xs: Vec<FeatureBuf> = (0..m).map(|_| FeatureBuf::zeros(n)).collect();
    let mut fs: Vec<FeatureBuf> = (0..m).map(|_| FeatureBuf::zeros(n)).collect();
    let mut z = FeatureBuf::from_slice(z0);
    let mut fz = FeatureBuf::zeros(n);
    let mut filled = 0;
    let mut head = 0;
    let mut steps = 0;
    loop {
        f(&z, &mut fz);
        let r = mon.observe(steps, &z, &fz)?;
        if (r < opts.tolerance && steps >= opts.min_steps) || steps >= opts.max_steps {
            return Ok(mon.finish(z, steps, r, start));
        }
        xs[head].copy_from_slice(&z);
        fs[head].copy_from_slice(&fz);
        head = (head + 1) % m;
        filled = (filled + 1).min(m);

        let alpha = if filled > 1 { anderson_coefficients(&xs[..filled], &fs[..filled]) } else { None };
        match alpha {
            Some(a) => {
                z.fill(0.0);
                for (j, aj) in a.iter().enumerate() {
                    for ((zi, fi), xi) in z.iter_mut().zip(fs[j].iter()).zip(xs[j].iter()) {
                        *zi += aj * (beta * fi + (1.0 - beta) * xi);
                    }
                }
            }
            None => {
                for (zi, fi) in z.iter_mut().zip(fz.iter()) {
                    *zi = beta * fi + (1.0 - beta) * *zi;
                }
            }
        }
        steps += 1;
    }
}

/// Constrained least squares through regularized normal equations.
/// Returns `None` when the system is singular or the result not finite.
fn anderson_coefficients(xs: &[FeatureBuf], fs: &[FeatureBuf]) -> Option<Vec<f64>> {
    let k = xs.len();
    let mut h = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v: f64 = (0..xs[i].len())
                .map(|t| (fs[i][t] - xs[i][t]) * (fs[j][t] - xs[j][t]))
                .sum();
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let scale = h.trace() / k as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    for i in 0..k {
        h[(i, i)] += ANDERSON_RIDGE * scale;
    }
    let y = h.cholesky()?.solve(&DVector::from_element(k, 1.0));
    let s: f64 = y.iter().sum();
    if !(s.abs() > 0.0) {
        return None;
    }
    let a: Vec<f64> = y.iter().map(|v| v / s).collect();
    a.iter().all(|v| v.is_finite()).then_some(a)
}

/// Good Broyden on `g(z) = f(z) - z` with inverse Jacobian estimate
/// `B = -I + sum_i u_i v_i^T`, restarted when the rank reaches `rank`.
pub fn broyden_solve<F>(mut f: F, z0: &[f64], rank: usize, opts: &SolveOptions) -> Result<FixedPointState>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let start = Instant::now();
    let n = z0.len();
    let rank = rank.max(1);
    let mut mon = Monitor::new(opts);
    let mut us: Vec<FeatureBuf> = (0..rank).map(|_| FeatureBuf::zeros(n)).collect();
    let mut vs: Vec<FeatureBuf> = (0..rank).map(|_| FeatureBuf::zeros(n)).collect();
    let mut used = 0;
    let mut z = FeatureBuf::from_slice(z0);
    let mut fz = FeatureBuf::zeros(n);
    let mut g = FeatureBuf::zeros(n);
    let mut dx = FeatureBuf::zeros(n);
    let mut dg = FeatureBuf::zeros(n);
    let mut u = FeatureBuf::zeros(n);
    let mut vt = FeatureBuf::zeros(n);
    let mut steps = 0;

    f(&z, &mut fz);
    let mut r = mon.observe(steps, &z, &fz)?;
    for i in 0..n {
        g[i] = fz[i] - z[i];
    }
    loop {
        if (r < opts.tolerance && steps >= opts.min_steps) || steps >= opts.max_steps {
            return Ok(mon.finish(z, steps, r, start));
        }
        // dx = -B g = g - U (V^T g)
        dx.copy_from_slice(&g);
        for j in 0..used {
            let c = dot(&vs[j], &g);
            axpy(-c, &us[j], &mut dx);
        }
        for i in 0..n {
            z[i] += dx[i];
        }
        steps += 1;
        f(&z, &mut fz);
        r = mon.observe(steps, &z, &fz)?;
        for i in 0..n {
            let gi = fz[i] - z[i];
            dg[i] = gi - g[i];
            g[i] = gi;
        }
        if used == rank {
            used = 0;
        }
        // v^T = dx^T B, u = (dx - B dg) / (v^T dg), with B dg = -dg + U (V^T dg)
        for i in 0..n {
            vt[i] = -dx[i];
            u[i] = dx[i] + dg[i];
        }
        for j in 0..used {
            axpy(dot(&dx, &us[j]), &vs[j], &mut vt);
            axpy(-dot(&vs[j], &dg), &us[j], &mut u);
        }
        let denom = dot(&vt, &dg);
        if denom.is_finite() && denom.abs() > f64::MIN_POSITIVE {
            for i in 0..n {
                us[used][i] = u[i] / denom;
            }
            vs[used].copy_from_slice(&vt);
            used += 1;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dispatches on `cfg.solver`.
pub fn solve<F>(f: F, z0: &[f64], cfg: &SolverConfig, opts: &SolveOptions) -> Result<FixedPointState>
where
    F: FnMut(&[f64], &mut [f64]),
{
    match cfg.solver {
        SolverKind::Anderson => anderson_solve(f, z0, cfg.memory, cfg.mixing, opts),
        SolverKind::Broyden => broyden_solve(f, z0, cfg.broyden_rank, opts),
        SolverKind::Picard => picard_solve(f, z0, opts),
    }
}
