//! Gradients through an implicit layer: implicit-function-theorem backward,
//! the 1-step phantom gradient and the fixed-point correction terms.

use std::cell::Cell;

use crate::deq::memory::FeatureBuf;
use crate::deq::{solve, DeqContext, MapTape, SolveOptions, SolverConfig};
use crate::error::{Error, Result};
use crate::params::ParamSpec;

/// Vector-Jacobian products of a map `f(z; theta)` around a linearization
/// point.
pub trait AdjointHooks {
    type Point;

    fn dim(&self) -> usize;
    fn num_params(&self) -> usize;
    /// Evaluates `f` at `z` and keeps what the products below need.
    fn linearize(&self, z: &[f64]) -> Self::Point;
    /// `f(z)` at the point.
    fn output<'p>(&self, at: &'p Self::Point) -> &'p [f64];
    /// Overwrites `out` with `u^T df/dz`.
    fn vjp_z(&self, at: &Self::Point, u: &[f64], out: &mut [f64]);
    /// Adds `u^T df/dtheta` into `grads`.
    fn vjp_theta(&self, at: &Self::Point, u: &[f64], grads: &mut [f64]);
}

impl AdjointHooks for DeqContext<'_> {
    type Point = MapTape;

    fn dim(&self) -> usize {
        DeqContext::dim(self)
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn linearize(&self, z: &[f64]) -> MapTape {
        DeqContext::linearize(self, z)
    }

    fn output<'p>(&self, at: &'p MapTape) -> &'p [f64] {
        &at.output
    }

    fn vjp_z(&self, at: &MapTape, u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.vjp(at, u, Some(out), None);
    }

    fn vjp_theta(&self, at: &MapTape, u: &[f64], grads: &mut [f64]) {
        self.vjp(at, u, None, Some(grads));
    }
}

/// Wraps hooks and counts calls.
pub struct CountingHooks<H> {
    pub inner: H,
    pub linearize_calls: Cell<usize>,
    pub vjp_z_calls: Cell<usize>,
    pub vjp_theta_calls: Cell<usize>,
}

impl<H> CountingHooks<H> {
    pub fn new(inner: H) -> Self {
        Self {
            inner,
            linearize_calls: Cell::new(0),
            vjp_z_calls: Cell::new(0),
            vjp_theta_calls: Cell::new(0),
        }
    }
}

impl<H: AdjointHooks> AdjointHooks for CountingHooks<H> {
    type Point = H::Point;

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn linearize(&self, z: &[f64]) -> H::Point {
        self.linearize_calls.set(self.linearize_calls.get() + 1);
        self.inner.linearize(z)
    }

    fn output<'p>(&self, at: &'p H::Point) -> &'p [f64] {
        self.inner.output(at)
    }

    fn vjp_z(&self, at: &H::Point, u: &[f64], out: &mut [f64]) {
        self.vjp_z_calls.set(self.vjp_z_calls.get() + 1);
        self.inner.vjp_z(at, u, out)
    }

    fn vjp_theta(&self, at: &H::Point, u: &[f64], grads: &mut [f64]) {
        self.vjp_theta_calls.set(self.vjp_theta_calls.get() + 1);
        self.inner.vjp_theta(at, u, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointStats {
    pub steps: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Flat gradient in the parameter layout.
    pub grads: Vec<f64>,
    pub adjoint: Option<AdjointStats>,
    pub corrections: usize,
}

impl GradReport {
    pub fn zeros(n: usize) -> Self {
        Self {
            grads: vec![0.0; n],
            adjoint: None,
            corrections: 0,
        }
    }

    /// Adds another report's gradient and correction count.
    pub fn accumulate(&mut self, other: &GradReport) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
        self.corrections += other.corrections;
        if self.adjoint.is_none() {
            self.adjoint = other.adjoint.clone();
        }
    }

    /// Gradient arrays by name.
    pub fn named<'a>(&'a self, specs: &'a [ParamSpec]) -> Vec<(&'a str, &'a [f64])> {
        specs
            .iter()
            .map(|s| (s.name.as_str(), &self.grads[s.offset..s.offset + s.len()]))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|v| v.is_finite())
    }
}

/// Solves `g = g^T df/dz + dL/dz*` at the fixed point with the configured
/// solver at `eps_train`, then returns `g*^T df/dtheta`. Only the
/// linearization at `z*` is needed; nothing from the forward solve.
pub fn ift_backward<H: AdjointHooks>(hooks: &H, at: &H::Point, dl_dz: &[f64], cfg: &SolverConfig) -> Result<GradReport> {
    let dl = FeatureBuf::from_slice(dl_dz);
    let opts = SolveOptions {
        tolerance: cfg.eps_train,
        max_steps: cfg.max_steps,
        samples: 0,
        min_steps: 0,
    };
    let zero = FeatureBuf::zeros(dl.len());
    let state = solve(
        |g, out| {
            hooks.vjp_z(at, g, out);
            for (o, d) in out.iter_mut().zip(dl.iter()) {
                *o += d;
            }
        },
        &zero,
        cfg,
        &opts,
    )?;
    if !state.converged {
        return Err(Error::Unconverged {
            steps: state.steps,
            residual: state.residual,
            tolerance: state.tolerance,
        });
    }
    let mut report = GradReport::zeros(hooks.num_params());
    hooks.vjp_theta(at, &state.z, &mut report.grads);
    report.adjoint = Some(AdjointStats {
        steps: state.steps,
        residual: state.residual,
        converged: true,
    });
    Ok(report)
}

/// `dL/dz*^T df/dtheta`: one extra pass through the layer.
pub fn phantom_1step<H: AdjointHooks>(hooks: &H, at: &H::Point, dl_dz: &[f64]) -> GradReport {
    let mut report = GradReport::zeros(hooks.num_params());
    hooks.vjp_theta(at, dl_dz, &mut report.grads);
    report
}

/// For each sampled iterate `z_i`: evaluate `y_i = f(z_i)`, let `head_loss`
/// score it (writing `dL/dy_i` and adding head-parameter gradients), then
/// back-propagate `dL/dy_i` through that one application. Terms are summed
/// with unit weight. Returns the report and the summed loss.
pub fn correction_gradients<H, L>(hooks: &H, sampled: &[FeatureBuf], mut head_loss: L) -> (GradReport, f64)
where
    H: AdjointHooks,
    L: FnMut(&[f64], &mut [f64], &mut [f64]) -> f64,
{
    let mut report = GradReport::zeros(hooks.num_params());
    let mut total = 0.0;
    for z in sampled {
        let at = hooks.linearize(z);
        let mut d_y = vec![0.0; z.len()];
        total += head_loss(hooks.output(&at), &mut d_y, &mut report.grads);
        hooks.vjp_theta(&at, &d_y, &mut report.grads);
        report.corrections += 1;
    }
    (report, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deq::{anderson_solve, memory};
    use crate::testutil::rng;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// `f(z) = A z + B theta`.
    struct Affine {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        theta: DVector<f64>,
    }

    impl Affine {
        fn random(seed: u64, n: usize, p: usize, rho: f64) -> Self {
            let mut r = rng(seed);
            let a = DMatrix::<f64>::from_fn(n, n, |_, _| r.sample(StandardNormal));
            let radius = a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
            Self {
                a: if rho == 0.0 { DMatrix::zeros(n, n) } else { a * (rho / radius) },
                b: DMatrix::from_fn(n, p, |_, _| r.sample(StandardNormal)),
                theta: DVector::from_fn(p, |_, _| r.sample(StandardNormal)),
            }
        }

        fn apply(&self, z: &[f64]) -> Vec<f64> {
            (&self.a * DVector::from_column_slice(z) + &self.b * &self.theta).as_slice().to_vec()
        }

        fn fixed_point(&self) -> DVector<f64> {
            let n = self.a.nrows();
            (DMatrix::identity(n, n) - &self.a).lu().solve(&(&self.b * &self.theta)).unwrap()
        }
    }

    impl AdjointHooks for Affine {
        type Point = Vec<f64>;
        fn dim(&self) -> usize {
            self.a.nrows()
        }
        fn num_params(&self) -> usize {
            self.theta.len()
        }
        fn linearize(&self, z: &[f64]) -> Vec<f64> {
            self.apply(z)
        }
        fn output<'p>(&self, at: &'p Vec<f64>) -> &'p [f64] {
            at
        }
        fn vjp_z(&self, _: &Vec<f64>, u: &[f64], out: &mut [f64]) {
            out.copy_from_slice((self.a.transpose() * DVector::from_column_slice(u)).as_slice());
        }
        fn vjp_theta(&self, _: &Vec<f64>, u: &[f64], grads: &mut [f64]) {
            let g = self.b.transpose() * DVector::from_column_slice(u);
            for (a, b) in grads.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
    }

    fn tight() -> SolverConfig {
        SolverConfig {
            eps_train: 1e-13,
            eps_reuse: 1e-13,
            max_steps: 400,
            ..Default::default()
        }
    }

    #[test]
    fn ift_matches_closed_form_on_affine_model() {
        let m = Affine::random(1, 12, 5, 0.9);
        let n = 12;
        let z = m.fixed_point();
        let target = DVector::from_fn(n, |i, _| (i as f64).sin());
        // L = 0.5 ||z* - t||^2
        let dl = &z - &target;
        let at = m.linearize(z.as_slice());
        let rep = ift_backward(&m, &at, dl.as_slice(), &tight()).unwrap();
        let exact = m.b.transpose() * (DMatrix::identity(n, n) - &m.a).transpose().lu().solve(&dl).unwrap();
        for (g, e) in rep.grads.iter().zip(exact.iter()) {
            assert!((g - e).abs() < 1e-10 * (1.0 + e.abs()), "{g} vs {e}");
        }
        assert!(rep.adjoint.unwrap().converged);
    }

    #[test]
    fn phantom_error_equals_neumann_tail() {
        let m = Affine::random(2, 10, 4, 0.9);
        let n = 10;
        let z = m.fixed_point();
        let dl = DVector::from_fn(n, |i, _| 1.0 / (1.0 + i as f64));
        let at = m.linearize(z.as_slice());
        let ift = ift_backward(&m, &at, dl.as_slice(), &tight()).unwrap();
        let counted = CountingHooks::new(m);
        let ph = phantom_1step(&counted, &at, dl.as_slice());
        assert_eq!(counted.vjp_theta_calls.get(), 1);
        assert_eq!(counted.vjp_z_calls.get(), 0);
        let m = &counted.inner;
        // IFT - phantom = B^T A^T (I - A)^{-T} dl
        let tail = m.b.transpose() * m.a.transpose() * (DMatrix::identity(n, n) - &m.a).transpose().lu().solve(&dl).unwrap();
        for i in 0..ph.grads.len() {
            assert!((ift.grads[i] - ph.grads[i] - tail[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn ift_equals_phantom_when_map_ignores_z() {
        let m = Affine::random(3, 6, 3, 0.0);
        let z = m.fixed_point();
        let dl = vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0];
        let at = m.linearize(z.as_slice());
        let ift = ift_backward(&m, &at, &dl, &tight()).unwrap();
        let ph = phantom_1step(&m, &at, &dl);
        assert_eq!(ift.grads, ph.grads);
    }

    #[test]
    fn unconverged_adjoint_is_an_error() {
        let m = Affine::random(4, 8, 2, 0.95);
        let at = m.linearize(m.fixed_point().as_slice());
        let cfg = SolverConfig {
            eps_train: 1e-14,
            max_steps: 2,
            ..Default::default()
        };
        assert!(matches!(ift_backward(&m, &at, &[1.0; 8], &cfg), Err(Error::Unconverged { .. })));
    }

    fn quadratic_head(t: &[f64]) -> impl FnMut(&[f64], &mut [f64], &mut [f64]) -> f64 + '_ {
        move |y, d_y, _| {
            let mut l = 0.0;
            for i in 0..y.len() {
                d_y[i] = y[i] - t[i];
                l += 0.5 * d_y[i] * d_y[i];
            }
            l
        }
    }

    #[test]
    fn correction_terms_behave() {
        let m = Affine::random(5, 6, 3, 0.8);
        let t = vec![1.0; 6];
        let (empty, l0) = correction_gradients(&m, &[], quadratic_head(&t));
        assert_eq!(empty.grads, vec![0.0; 3]);
        assert_eq!((empty.corrections, l0), (0, 0.0));

        let z = m.fixed_point();
        let zs = FeatureBuf::from_slice(z.as_slice());
        let (one, _) = correction_gradients(&m, std::slice::from_ref(&zs), quadratic_head(&t));
        let dl: Vec<f64> = z.iter().zip(&t).map(|(a, b)| a - b).collect();
        let ph = phantom_1step(&m, &m.linearize(z.as_slice()), &dl);
        for (a, b) in one.grads.iter().zip(&ph.grads) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut r = rng(6);
        let samples: Vec<FeatureBuf> = (0..3)
            .map(|_| FeatureBuf::from_vec((0..6).map(|_| r.gen_range(-1.0..1.0)).collect()))
            .collect();
        let (all, l_all) = correction_gradients(&m, &samples, quadratic_head(&t));
        let mut sum = GradReport::zeros(3);
        let mut l_sum = 0.0;
        for s in &samples {
            let (part, l) = correction_gradients(&m, std::slice::from_ref(s), quadratic_head(&t));
            sum.accumulate(&part);
            l_sum += l;
        }
        assert_eq!(all.corrections, 3);
        assert_eq!(sum.corrections, 3);
        assert!((l_all - l_sum).abs() < 1e-12);
        for (a, b) in all.grads.iter().zip(&sum.grads) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_memory_is_step_independent() {
        let m = Affine::random(7, 16, 4, 0.99);
        let mut peaks = Vec::new();
        for max_steps in [5, 10, 40] {
            memory::reset_peak();
            let base = memory::live_buffers();
            let opts = SolveOptions {
                tolerance: 1e-300,
                max_steps,
                samples: 3,
                min_steps: 0,
            };
            let state = anderson_solve(|z, out| out.copy_from_slice(&m.apply(z)), &[0.0; 16], 5, 1.0, &opts).unwrap();
            assert_eq!(state.steps, max_steps);
            let at = m.linearize(&state.z);
            let cfg = SolverConfig {
                eps_train: 1e-8,
                max_steps: 400,
                ..Default::default()
            };
            ift_backward(&m, &at, &[1.0; 16], &cfg).unwrap();
            drop(state);
            peaks.push(memory::peak_buffers() - base);
        }
        assert_eq!(peaks[0], peaks[1]);
        assert_eq!(peaks[1], peaks[2]);
    }

    #[test]
    fn named_gradients_follow_specs() {
        let specs = vec![
            ParamSpec {
                name: "a".into(),
                shape: vec![2],
                offset: 0,
            },
            ParamSpec {
                name: "b".into(),
                shape: vec![1],
                offset: 2,
            },
        ];
        let rep = GradReport {
            grads: vec![1.0, 2.0, 3.0],
            adjoint: None,
            corrections: 0,
        };
        let named = rep.named(&specs);
        assert_eq!(named[1], ("b", &[3.0][..]));
        assert!(rep.is_finite());
    }
}
