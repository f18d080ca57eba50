//! Molecular dynamics and relaxation drivers, the reuse deviation metric,
//! and dataset generation from the oracle potential.
//!
//! Units: Å, fs, amu, eV, K.

mod oracle;
pub mod xyz;

pub use oracle::{oracle_eval, Bond, LennardJones, OraclePotential, OracleSystem, PRESETS};

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::deq::{SolveStats, SolverConfig};
use crate::eqnet::max_force;
use crate::error::{Error, Result};
use crate::graph::AtomicSystem;
use crate::model::Model;
use crate::vec3::{norm, Vec3};

/// Boltzmann constant, eV/K.
pub const KB: f64 = 8.617333262e-5;
/// Converts eV/(Å amu) to Å/fs² (equivalently eV/amu to Å²/fs²).
pub const ACCEL: f64 = 9.648533212e-3;
/// Largest per-atom displacement of one relaxation step, Å.
pub const MAX_DISPLACEMENT: f64 = 0.2;
/// Atoms whose reference and reused force norms are both below this are
/// left out of the deviation mean.
pub const DEVIATION_FLOOR: f64 = 1e-10;

/// Energy, forces and (for model-driven runs) solver statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub energy: f64,
    pub forces: Vec<Vec3>,
    pub stats: Option<SolveStats>,
}

pub trait ForceProvider {
    fn evaluate(&mut self, system: &AtomicSystem) -> Result<Evaluation>;
}

impl ForceProvider for OraclePotential {
    fn evaluate(&mut self, system: &AtomicSystem) -> Result<Evaluation> {
        let (energy, forces) = self.eval(system)?;
        Ok(Evaluation {
            energy,
            forces,
            stats: None,
        })
    }
}

/// Adapts a closure returning `(E, F)`.
pub struct FnProvider<F>(pub F);

impl<F: FnMut(&AtomicSystem) -> Result<(f64, Vec<Vec3>)>> ForceProvider for FnProvider<F> {
    fn evaluate(&mut self, system: &AtomicSystem) -> Result<Evaluation> {
        let (energy, forces) = (self.0)(system)?;
        Ok(Evaluation {
            energy,
            forces,
            stats: None,
        })
    }
}

/// Model-driven forces. With `reuse`, each call warm-starts from the
/// previous fixed point; the first call is always a cold solve.
pub struct ModelForceField<'a> {
    pub model: &'a Model,
    pub solver: SolverConfig,
    pub reuse: bool,
    state: Option<Vec<f64>>,
}

impl<'a> ModelForceField<'a> {
    pub fn new(model: &'a Model, solver: SolverConfig, reuse: bool) -> Self {
        Self {
            model,
            solver,
            reuse,
            state: None,
        }
    }

    /// Forget the stored fixed point.
    pub fn reset(&mut self) {
        self.state = None;
    }
}

impl ForceProvider for ModelForceField<'_> {
    fn evaluate(&mut self, system: &AtomicSystem) -> Result<Evaluation> {
        let warm = if self.reuse { self.state.as_deref() } else { None };
        let out = self.model.forward(system, &self.solver, warm)?;
        if self.reuse {
            self.state = Some(out.z);
        }
        Ok(Evaluation {
            energy: out.energy,
            forces: out.forces,
            stats: Some(out.stats),
        })
    }
}

/// `½ Σ m v²` in eV.
pub fn kinetic_energy(system: &AtomicSystem) -> f64 {
    let Some(v) = &system.velocities else { return 0.0 };
    let m = system.masses_or_default();
    0.5 * m.iter().zip(v).map(|(m, v)| m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).sum::<f64>() / ACCEL
}

/// Velocities drawn from the Maxwell-Boltzmann distribution at
/// `temperature`, with the center-of-mass drift removed.
pub fn maxwell_boltzmann<R: Rng + ?Sized>(system: &AtomicSystem, temperature: f64, rng: &mut R) -> Result<AtomicSystem> {
    if !(temperature >= 0.0) {
        return Err(Error::Invalid(format!("temperature {temperature} K")));
    }
    let m = system.masses_or_default();
    let mut v: Vec<Vec3> = m
        .iter()
        .map(|&mi| {
            let s = (KB * temperature * ACCEL / mi).sqrt();
            [
                s * rng.sample::<f64, _>(StandardNormal),
                s * rng.sample::<f64, _>(StandardNormal),
                s * rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();
    let mt: f64 = m.iter().sum();
    for k in 0..3 {
        let p: f64 = m.iter().zip(&v).map(|(mi, vi)| mi * vi[k]).sum();
        for vi in &mut v {
            vi[k] -= p / mt;
        }
    }
    system.clone().with_velocities(v)
}

/// One velocity-Verlet step: half kick, drift, new forces, half kick.
/// `forces` are the forces at the current positions; returns the new state
/// and the evaluation at the new positions.
pub fn velocity_verlet_step<P: ForceProvider + ?Sized>(
    system: &AtomicSystem,
    forces: &[Vec3],
    dt: f64,
    provider: &mut P,
) -> Result<(AtomicSystem, Evaluation)> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step {dt}")));
    }
    let n = system.len();
    if forces.len() != n {
        return Err(Error::LayoutMismatch(format!("{} forces for {n} atoms", forces.len())));
    }
    let m = system.masses_or_default();
    let mut v = system.velocities.clone().unwrap_or_else(|| vec![[0.0; 3]; n]);
    let mut next = system.clone();
    for i in 0..n {
        let a = ACCEL / m[i];
        for k in 0..3 {
            v[i][k] += 0.5 * dt * a * forces[i][k];
            next.positions[i][k] += dt * v[i][k];
        }
    }
    let eval = provider.evaluate(&next)?;
    for i in 0..n {
        let a = ACCEL / m[i];
        for k in 0..3 {
            v[i][k] += 0.5 * dt * a * eval.forces[i][k];
        }
    }
    next.velocities = Some(v);
    Ok((next, eval))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub system: AtomicSystem,
    pub energy: f64,
    pub forces: Vec<Vec3>,
    pub stats: Option<SolveStats>,
}

/// Why a run stopped before its requested length.
#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    /// Index of the frame that could not be computed.
    pub frame: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    /// Time between consecutive frames, fs.
    pub dt: f64,
    pub truncated: Option<Truncation>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Same species in the same order in every frame.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Invalid(format!("trajectory time step {}", self.dt)));
        }
        if let Some(first) = self.frames.first() {
            for (i, f) in self.frames.iter().enumerate() {
                if f.system.atomic_numbers != first.system.atomic_numbers {
                    return Err(Error::Invalid(format!("frame {i} changes the atoms")));
                }
                if f.forces.len() != f.system.len() {
                    return Err(Error::Invalid(format!("frame {i} has a force count mismatch")));
                }
            }
        }
        Ok(())
    }

    pub fn systems(&self) -> Vec<AtomicSystem> {
        self.frames.iter().map(|f| f.system.clone()).collect()
    }

    /// Solver steps per frame, for model-driven runs.
    pub fn solver_steps(&self) -> Vec<usize> {
        self.frames.iter().filter_map(|f| f.stats.as_ref().map(|s| s.steps)).collect()
    }

    /// `frame,energy,steps,residual,converged,reused` rows.
    pub fn write_stats_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "frame,energy,steps,residual,converged,reused")?;
        for (i, f) in self.frames.iter().enumerate() {
            match &f.stats {
                Some(s) => writeln!(
                    w,
                    "{i},{:.10e},{},{:.6e},{},{}",
                    f.energy, s.steps, s.residual, s.converged as u8, s.reused as u8
                )?,
                None => writeln!(w, "{i},{:.10e},,,,", f.energy)?,
            }
        }
        Ok(())
    }
}

/// NVE dynamics for `n_steps` steps; `n_steps + 1` frames on success. A
/// failed evaluation after the first frame truncates the run and records
/// the index of the frame that failed.
pub fn run_md<P: ForceProvider + ?Sized>(provider: &mut P, system0: &AtomicSystem, n_steps: usize, dt: f64) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step {dt}")));
    }
    if system0.velocities.is_none() {
        return Err(Error::Invalid("molecular dynamics needs initial velocities".into()));
    }
    let first = provider.evaluate(system0)?;
    let mut frames = vec![Frame {
        system: system0.clone(),
        energy: first.energy,
        forces: first.forces,
        stats: first.stats,
    }];
    let mut truncated = None;
    for step in 1..=n_steps {
        let last = frames.last().expect("at least one frame");
        match velocity_verlet_step(&last.system, &last.forces, dt, provider) {
            Ok((system, e)) if e.forces.iter().flatten().all(|v| v.is_finite()) => frames.push(Frame {
                system,
                energy: e.energy,
                forces: e.forces,
                stats: e.stats,
            }),
            Ok(_) => {
                truncated = Some(Truncation {
                    frame: step,
                    reason: "non-finite forces".into(),
                });
                break;
            }
            Err(err) => {
                log::warn!("trajectory truncated at frame {step}: {err}");
                truncated = Some(Truncation {
                    frame: step,
                    reason: err.to_string(),
                });
                break;
            }
        }
    }
    Ok(Trajectory { frames, dt, truncated })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxResult {
    pub system: AtomicSystem,
    pub energy: f64,
    pub forces: Vec<Vec3>,
    /// Energy after each evaluation, starting with the initial geometry.
    pub energies: Vec<f64>,
    /// Solver steps of each evaluation (empty for the oracle).
    pub solver_steps: Vec<usize>,
    /// Position updates performed.
    pub steps_taken: usize,
    /// Whether the force threshold was reached.
    pub converged: bool,
    pub wall_time: f64,
    pub truncated: Option<Truncation>,
}

impl RelaxResult {
    pub fn mean_solver_steps(&self) -> f64 {
        mean_usize(&self.solver_steps)
    }
}

/// Steepest descent `x += step_size F`, with each atom's displacement
/// clipped to [`MAX_DISPLACEMENT`]. Stops early once the largest force norm
/// is below `f_max`.
pub fn relax<P: ForceProvider + ?Sized>(
    provider: &mut P,
    system0: &AtomicSystem,
    n_steps: usize,
    step_size: f64,
    f_max: f64,
) -> Result<RelaxResult> {
    if !(step_size > 0.0) {
        return Err(Error::Invalid(format!("relaxation step size {step_size}")));
    }
    let t0 = Instant::now();
    let mut system = system0.clone();
    let mut e = provider.evaluate(&system)?;
    let mut energies = vec![e.energy];
    let mut solver_steps: Vec<usize> = e.stats.iter().map(|s| s.steps).collect();
    let mut steps_taken = 0;
    let mut truncated = None;
    let mut converged = max_force(&e.forces) < f_max;
    while !converged && steps_taken < n_steps {
        let mut next = system.clone();
        for (p, f) in next.positions.iter_mut().zip(&e.forces) {
            let fnorm = norm(*f);
            let c = if step_size * fnorm > MAX_DISPLACEMENT {
                MAX_DISPLACEMENT / fnorm
            } else {
                step_size
            };
            for k in 0..3 {
                p[k] += c * f[k];
            }
        }
        match provider.evaluate(&next) {
            Ok(ne) => {
                system = next;
                e = ne;
                steps_taken += 1;
                energies.push(e.energy);
                solver_steps.extend(e.stats.iter().map(|s| s.steps));
                converged = max_force(&e.forces) < f_max;
            }
            Err(err) => {
                truncated = Some(Truncation {
                    frame: steps_taken + 1,
                    reason: err.to_string(),
                });
                break;
            }
        }
    }
    Ok(RelaxResult {
        system,
        energy: e.energy,
        forces: e.forces,
        energies,
        solver_steps,
        steps_taken,
        converged,
        wall_time: t0.elapsed().as_secs_f64(),
        truncated,
    })
}

/// One row of the reuse ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub fp_reuse: bool,
    /// Tolerance after the first solve.
    pub eps_reuse: f64,
    /// Mean over systems of the wall time per relaxation, s.
    pub time: f64,
    pub time_std: f64,
    /// Mean over systems of the mean solver steps per evaluation.
    pub mean_steps: f64,
    /// Standard deviation of the per-system mean across systems.
    pub std_steps: f64,
    /// Final energy of each system.
    pub final_energies: Vec<f64>,
}

/// Relaxes every system three times: without reuse, with reuse at the
/// training tolerance, and with reuse at `solver.eps_reuse`.
pub fn relax_ablation(
    model: &Model,
    solver: &SolverConfig,
    systems: &[AtomicSystem],
    n_steps: usize,
    step_size: f64,
    f_max: f64,
) -> Result<Vec<AblationRow>> {
    let variants = [
        (false, solver.eps_train),
        (true, solver.eps_train),
        (true, solver.eps_reuse),
    ];
    let mut rows = Vec::new();
    for (reuse, eps) in variants {
        let cfg = SolverConfig {
            eps_reuse: eps,
            ..solver.clone()
        };
        let mut per_system = Vec::new();
        let mut times = Vec::new();
        let mut finals = Vec::new();
        for s in systems {
            let mut ff = ModelForceField::new(model, cfg.clone(), reuse);
            let r = relax(&mut ff, s, n_steps, step_size, f_max)?;
            if let Some(t) = &r.truncated {
                return Err(Error::Invalid(format!("relaxation stopped at step {}: {}", t.frame, t.reason)));
            }
            per_system.push(r.mean_solver_steps());
            times.push(r.wall_time);
            finals.push(r.energy);
        }
        let (mean_steps, std_steps) = mean_std(&per_system);
        let (time, time_std) = mean_std(&times);
        rows.push(AblationRow {
            fp_reuse: reuse,
            eps_reuse: eps,
            time,
            time_std,
            mean_steps,
            std_steps,
            final_energies: finals,
        });
    }
    Ok(rows)
}

/// Mean over non-excluded atoms of `‖F_fpr − F‖ / (½(‖F_fpr‖ + ‖F‖))`, and
/// the number of excluded atoms. `None` when every atom is excluded.
pub fn relative_force_deviation(reference: &[Vec3], reused: &[Vec3]) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for (a, b) in reference.iter().zip(reused) {
        let (na, nb) = (norm(*a), norm(*b));
        if na < DEVIATION_FLOOR && nb < DEVIATION_FLOOR {
            excluded += 1;
            continue;
        }
        let d = norm([b[0] - a[0], b[1] - a[1], b[2] - a[2]]);
        sum += d / (0.5 * (na + nb));
        used += 1;
    }
    ((used > 0).then(|| sum / used as f64), excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovReport {
    /// Mean over frames of the per-frame atom mean.
    pub mean: f64,
    /// Per-frame deviation; `None` where every atom was excluded.
    pub per_frame: Vec<Option<f64>>,
    pub excluded_atoms: usize,
    /// Solver steps of the cold-start pass.
    pub steps_cold: Vec<usize>,
    /// Solver steps of the reuse pass.
    pub steps_reuse: Vec<usize>,
}

impl MarkovReport {
    /// `frame,deviation,steps_cold,steps_reuse` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "frame,deviation,steps_cold,steps_reuse")?;
        for (i, d) in self.per_frame.iter().enumerate() {
            let d = d.map_or("nan".to_string(), |d| format!("{d:.10e}"));
            writeln!(w, "{i},{d},{},{}", self.steps_cold[i], self.steps_reuse[i])?;
        }
        Ok(())
    }
}

/// Predicts forces along `systems` twice: every frame from zero at
/// `eps_train`, and as a reuse chain (first frame cold, then warm-started
/// at `eps_reuse`). Compares the two with [`relative_force_deviation`].
pub fn markov_deviation(model: &Model, systems: &[AtomicSystem], solver: &SolverConfig) -> Result<MarkovReport> {
    if systems.is_empty() {
        return Err(Error::Invalid("empty trajectory".into()));
    }
    let mut cold = ModelForceField::new(model, solver.clone(), false);
    let mut warm = ModelForceField::new(model, solver.clone(), true);
    let mut per_frame = Vec::with_capacity(systems.len());
    let mut excluded = 0;
    let mut steps_cold = Vec::with_capacity(systems.len());
    let mut steps_reuse = Vec::with_capacity(systems.len());
    for s in systems {
        let a = cold.evaluate(s)?;
        let b = warm.evaluate(s)?;
        let (d, ex) = relative_force_deviation(&a.forces, &b.forces);
        per_frame.push(d);
        excluded += ex;
        steps_cold.push(a.stats.map_or(0, |s| s.steps));
        steps_reuse.push(b.stats.map_or(0, |s| s.steps));
    }
    let valid: Vec<f64> = per_frame.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(MarkovReport {
        mean,
        per_frame,
        excluded_atoms: excluded,
        steps_cold,
        steps_reuse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub frames: usize,
    /// Integrator step, fs.
    pub dt: f64,
    /// Initial velocity temperature, K.
    pub temperature: f64,
    pub seed: u64,
    /// Integrator steps between recorded frames.
    pub stride: usize,
    /// Integrator steps discarded before the first recorded frame.
    pub equilibration: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            frames: 2000,
            dt: 0.5,
            temperature: 500.0,
            seed: 0,
            stride: 1,
            equilibration: 200,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.stride == 0 || !(self.dt > 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("invalid dataset settings {self:?}")));
        }
        Ok(())
    }
}

/// Oracle-driven NVE trajectory with exact labels. Frames are `stride`
/// integrator steps apart, so the trajectory's `dt` is `dt * stride`.
pub fn gen_dataset(potential: &OraclePotential, system0: &AtomicSystem, spec: &DatasetSpec) -> Result<Trajectory> {
    spec.validate()?;
    potential.validate(system0.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut system = maxwell_boltzmann(system0, spec.temperature, &mut rng)?;
    let mut pot = potential.clone();
    let mut e = pot.evaluate(&system)?;
    let mut frames = Vec::with_capacity(spec.frames);
    let total = spec.equilibration + (spec.frames - 1) * spec.stride;
    for step in 0..=total {
        if step >= spec.equilibration && (step - spec.equilibration) % spec.stride == 0 {
            frames.push(Frame {
                system: system.clone(),
                energy: e.energy,
                forces: e.forces.clone(),
                stats: None,
            });
        }
        if step < total {
            let (s, ne) = velocity_verlet_step(&system, &e.forces, spec.dt, &mut pot)?;
            system = s;
            e = ne;
        }
    }
    Ok(Trajectory {
        frames,
        dt: spec.dt * spec.stride as f64,
        truncated: None,
    })
}

fn mean_usize(v: &[usize]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<usize>() as f64 / v.len() as f64
    }
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}
