//! Error statistics, per-system normalization across models, solver-step
//! histograms and forward-pass timing.
//!
//! Force MAE is reported two ways: per component (mean of `|ΔF_ik|` over
//! atoms and Cartesian components, the headline number) and per atom (mean
//! of `‖ΔF_i‖`).

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::deq::{deq_forward_ctx, DeqContext, SolverConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::map_ordered;
use crate::sim::Frame;
use crate::vec3::{norm, sub, Vec3};

/// Forward calls discarded before timing starts.
pub const TIMING_WARMUP: usize = 10;

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LayoutMismatch(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("mean of an empty series".into()));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean of `|ΔF|` over atoms and components.
pub fn force_mae(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mae(&flat(pred), &flat(gt))
}

/// Mean of the per-atom error norm `‖ΔF_i‖`.
pub fn force_mae_norm(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::LayoutMismatch(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| norm(sub(*a, *b))).sum::<f64>() / pred.len() as f64)
}

fn flat(v: &[Vec3]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// `(x - min) / (max - min)`: the best model maps to 0 and the worst to 1.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Invalid("normalization needs at least two values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite error value".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(Error::ZeroRange(min));
    }
    Ok(values.iter().map(|v| (v - min) / (max - min)).collect())
}

/// Per-model mean over systems. `per_system[s][m]` is model `m`'s value on
/// system `s`.
pub fn aggregate(per_system: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = per_system.first() else {
        return Err(Error::Invalid("no systems to aggregate".into()));
    };
    let m = first.len();
    if per_system.iter().any(|s| s.len() != m) {
        return Err(Error::LayoutMismatch("systems report different model counts".into()));
    }
    let n = per_system.len() as f64;
    Ok((0..m).map(|j| per_system.iter().map(|s| s[j]).sum::<f64>() / n).collect())
}

/// Normalizes each system's row, then averages. Systems whose values are
/// all equal are reported by index instead of aborting the whole table.
pub fn normalized_average(per_system: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, s) in per_system.iter().enumerate() {
        match minmax_normalize(s) {
            Ok(r) => rows.push(r),
            Err(Error::ZeroRange(_)) => skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok((aggregate(&rows)?, skipped))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Distribution of solver step counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepHistogram {
    pub counts: BTreeMap<usize, usize>,
    pub total: usize,
    pub mean: f64,
    pub median: f64,
}

impl StepHistogram {
    /// Percentage of samples per step count.
    pub fn percentages(&self) -> BTreeMap<usize, f64> {
        self.counts
            .iter()
            .map(|(&k, &c)| (k, 100.0 * c as f64 / self.total as f64))
            .collect()
    }

    /// `steps,count,percent` rows; with `log` an extra `log10_percent`
    /// column.
    pub fn write_csv<W: Write>(&self, mut w: W, log: bool) -> std::io::Result<()> {
        if log {
            writeln!(w, "steps,count,percent,log10_percent")?;
        } else {
            writeln!(w, "steps,count,percent")?;
        }
        for (k, p) in self.percentages() {
            let c = self.counts[&k];
            if log {
                writeln!(w, "{k},{c},{p:.10},{:.10}", p.log10())?;
            } else {
                writeln!(w, "{k},{c},{p:.10}")?;
            }
        }
        Ok(())
    }
}

pub fn step_histogram(steps: &[usize]) -> Result<StepHistogram> {
    if steps.is_empty() {
        return Err(Error::Invalid("no solver statistics".into()));
    }
    let mut counts = BTreeMap::new();
    for &s in steps {
        *counts.entry(s).or_insert(0) += 1;
    }
    let as_f: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    Ok(StepHistogram {
        counts,
        total: steps.len(),
        mean: mean(&as_f),
        median: median(&as_f),
    })
}

/// Errors and solver cost of one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleEval {
    pub index: usize,
    pub energy_error: f64,
    pub force_mae: f64,
    pub force_mae_norm: f64,
    pub steps: usize,
    pub converged: bool,
    /// Forward time, s.
    pub time: f64,
    pub forces: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub system: String,
    pub samples: usize,
    pub force_mae: f64,
    pub force_mae_norm: f64,
    pub energy_mae: f64,
    pub mean_steps: f64,
    pub median_steps: f64,
    /// Mean forward time over the timed samples, s.
    pub mean_time: f64,
    /// Per-model normalized scores, when several models were compared.
    pub normalized: Option<Vec<f64>>,
}

pub const REPORT_HEADER: &str = "system,samples,force_mae,force_mae_norm,energy_mae,mean_steps,median_steps,mean_time";

impl EvalReport {
    pub fn from_samples(system: &str, samples: &[SampleEval]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("no samples evaluated".into()));
        }
        let pick = |f: fn(&SampleEval) -> f64| samples.iter().map(f).collect::<Vec<f64>>();
        let steps = pick(|s| s.steps as f64);
        let r = Self {
            system: system.to_string(),
            samples: samples.len(),
            force_mae: mean(&pick(|s| s.force_mae)),
            force_mae_norm: mean(&pick(|s| s.force_mae_norm)),
            energy_mae: mean(&pick(|s| s.energy_error.abs())),
            mean_steps: mean(&steps),
            median_steps: median(&steps),
            mean_time: mean(&pick(|s| s.time)),
            normalized: None,
        };
        if ![r.force_mae, r.force_mae_norm, r.energy_mae, r.mean_steps, r.mean_time]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Invalid("non-finite evaluation statistics".into()));
        }
        Ok(r)
    }

    /// Row matching [`REPORT_HEADER`]; the time column is excluded when
    /// `with_time` is false so the row is reproducible.
    pub fn csv_row(&self, with_time: bool) -> String {
        let time = if with_time { format!("{:.6e}", self.mean_time) } else { String::new() };
        format!(
            "{},{},{:.10e},{:.10e},{:.10e},{:.6},{:.1},{}",
            self.system,
            self.samples,
            self.force_mae,
            self.force_mae_norm,
            self.energy_mae,
            self.mean_steps,
            self.median_steps,
            time
        )
    }
}

/// Cold-start inference on every frame. Timing covers the fixed-point solve
/// and heads only, after [`TIMING_WARMUP`] untimed calls; graph
/// construction is excluded.
pub fn evaluate(model: &Model, frames: &[Frame], solver: &SolverConfig, threads: usize) -> Result<Vec<SampleEval>> {
    if frames.is_empty() {
        return Err(Error::Invalid("no frames to evaluate".into()));
    }
    if let Some(f) = frames.first() {
        let ctx = DeqContext::new(&model.net, &model.params, &f.system, None)?;
        for _ in 0..TIMING_WARMUP {
            deq_forward_ctx(&ctx, solver, None)?;
        }
    }
    let results = map_ordered(frames, threads, |i, f| -> Result<SampleEval> {
        let ctx = DeqContext::new(&model.net, &model.params, &f.system, None)?;
        let t0 = Instant::now();
        let out = deq_forward_ctx(&ctx, solver, None)?;
        let time = t0.elapsed().as_secs_f64();
        Ok(SampleEval {
            index: i,
            energy_error: out.energy + model.energy_offset - f.energy,
            force_mae: force_mae(&out.forces, &f.forces)?,
            force_mae_norm: force_mae_norm(&out.forces, &f.forces)?,
            steps: out.stats.steps,
            converged: out.stats.converged,
            time,
            forces: out.forces,
        })
    });
    results.into_iter().collect()
}

/// `index,energy_error,force_mae,force_mae_norm,steps,converged` rows.
pub fn write_samples_csv<W: Write>(mut w: W, samples: &[SampleEval]) -> std::io::Result<()> {
    writeln!(w, "index,energy_error,force_mae,force_mae_norm,steps,converged")?;
    for s in samples {
        writeln!(
            w,
            "{},{:.10e},{:.10e},{:.10e},{},{}",
            s.index, s.energy_error, s.force_mae, s.force_mae_norm, s.steps, s.converged as u8
        )?;
    }
    Ok(())
}

/// One row of a tolerance sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tolerance: f64,
    /// Against the labels.
    pub force_mae: f64,
    /// Against the predictions at the tightest tolerance.
    pub force_mae_ref: f64,
    pub mean_time: f64,
    pub mean_steps: f64,
}

/// Evaluates at each tolerance (cold start). Tolerances are processed
/// tightest first; the tightest one is the reference.
pub fn sweep_tolerance(model: &Model, frames: &[Frame], solver: &SolverConfig, tolerances: &[f64], threads: usize) -> Result<Vec<SweepRow>> {
    let mut tols = tolerances.to_vec();
    if tols.is_empty() || tols.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Invalid("tolerances must be positive".into()));
    }
    tols.sort_by(f64::total_cmp);
    tols.dedup();
    let mut reference: Option<Vec<SampleEval>> = None;
    let mut rows = Vec::new();
    for &tol in &tols {
        let cfg = SolverConfig {
            eps_train: tol,
            eps_reuse: solver.eps_reuse.max(tol),
            ..solver.clone()
        };
        let samples = evaluate(model, frames, &cfg, threads)?;
        let reference = reference.get_or_insert_with(|| samples.clone());
        let dev: Vec<f64> = samples
            .iter()
            .zip(reference.iter())
            .map(|(a, b)| force_mae(&a.forces, &b.forces))
            .collect::<Result<_>>()?;
        let report = EvalReport::from_samples("sweep", &samples)?;
        rows.push(SweepRow {
            tolerance: tol,
            force_mae: report.force_mae,
            force_mae_ref: mean(&dev),
            mean_time: report.mean_time,
            mean_steps: report.mean_steps,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mae(&[1.5, 2.5, -0.5], &[1.0, 2.0, -1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(mae(&[1.0], &[]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn mae_matches_brute_force() {
        let mut r = rng(1);
        let a: Vec<f64> = (0..1001).map(|_| r.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..1001).map(|_| r.gen_range(-5.0..5.0)).collect();
        let mut brute = 0.0;
        for i in (0..a.len()).rev() {
            brute += (a[i] - b[i]).abs();
        }
        assert!((mae(&a, &b).unwrap() - brute / 1001.0).abs() < 1e-12);
    }

    #[test]
    fn force_mae_variants() {
        let p = vec![[3.0, 4.0, 0.0], [0.0; 3]];
        let g = vec![[0.0; 3]; 2];
        assert!((force_mae(&p, &g).unwrap() - 7.0 / 6.0).abs() < 1e-15);
        assert!((force_mae_norm(&p, &g).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(matches!(minmax_normalize(&[5.0, 5.0]), Err(Error::ZeroRange(_))));
        assert!(minmax_normalize(&[1.0]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let one = vec![vec![0.0, 0.3, 1.0]];
        assert_eq!(aggregate(&one).unwrap(), one[0]);
        let rows = vec![vec![0.0, 1.0, 0.5], vec![0.0, 0.2, 1.0]];
        assert_eq!(aggregate(&rows).unwrap()[0], 0.0);
        let (avg, skipped) = normalized_average(&[vec![1.0, 3.0], vec![2.0, 2.0], vec![4.0, 2.0]]).unwrap();
        assert_eq!(avg, vec![0.5, 0.5]);
        assert_eq!(skipped, vec![1]);
    }

    #[test]
    fn histogram_examples() {
        let h = step_histogram(&[3, 3, 5, 8]).unwrap();
        assert_eq!(h.counts[&3], 2);
        assert_eq!(h.mean, 4.75);
        assert_eq!(h.median, 4.0);
        let p = h.percentages();
        assert_eq!(p[&3], 50.0);
        let mut lin = Vec::new();
        h.write_csv(&mut lin, false).unwrap();
        assert_eq!(String::from_utf8(lin).unwrap().lines().next(), Some("steps,count,percent"));
        let mut log = Vec::new();
        h.write_csv(&mut log, true).unwrap();
        assert!(String::from_utf8(log).unwrap().contains("3,2,50.0000000000,1.6989700043"));
        assert!(step_histogram(&[]).is_err());
    }

    proptest! {
        #[test]
        fn minmax_hits_bounds_exactly(v in prop::collection::vec(-1e3f64..1e3, 2..20)) {
            prop_assume!(v.iter().any(|x| *x != v[0]));
            let n = minmax_normalize(&v).unwrap();
            prop_assert_eq!(n.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            prop_assert_eq!(n.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }

        #[test]
        fn minmax_is_affine_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..10), a in 0.1f64..10.0, b in -10.0f64..10.0) {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi - lo > 1e-3);
            let n = minmax_normalize(&v).unwrap();
            let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let m = minmax_normalize(&w).unwrap();
            for (x, y) in n.iter().zip(&m) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn aggregate_is_permutation_invariant(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..8), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rng(seed));
            let a = aggregate(&rows).unwrap();
            let b = aggregate(&shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn histogram_percentages_sum_to_100(steps in prop::collection::vec(0usize..40, 1..300)) {
            let h = step_histogram(&steps).unwrap();
            let s: f64 = h.percentages().values().sum();
            prop_assert!((s - 100.0).abs() < 1e-9);
        }
    }
}
