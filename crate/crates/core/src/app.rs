//! Command implementations behind the `deqff` binary.
//!
//! Every CSV starts with one `#` comment line holding the command and a
//! timestamp; everything after it depends only on the inputs. Wall-clock
//! columns are written only when [`Output::timing`] is set.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::deq::SolverConfig;
use crate::graph::AtomicSystem;
use crate::metrics::{self, step_histogram, EvalReport, SweepRow, REPORT_HEADER};
use crate::model::Model;
use crate::parallel::max_threads;
use crate::sim::{self, xyz, AblationRow, DatasetSpec, MarkovReport, ModelForceField, OracleSystem, Trajectory};
use crate::train::{self, Checkpoint, TrainOutcome};
use crate::{Error, Result};

pub const MANIFEST_FORMAT: &str = "deqff-dataset";

/// Shared output switches.
#[derive(Debug, Clone, Copy)]
pub struct Output {
    /// Write wall-clock columns. Off gives files that are byte-identical
    /// across reruns.
    pub timing: bool,
}

impl Default for Output {
    fn default() -> Self {
        Self { timing: true }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Opens `path` and writes the `# deqff <command> ...` comment line.
pub fn csv_file(path: &Path, command: &str) -> Result<BufWriter<File>> {
    let mut w = create(path)?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    writeln!(w, "# deqff {command} unix_time={secs}")?;
    Ok(w)
}

/// `base` with `suffix` appended to the file stem, e.g. `out.csv` ->
/// `out_samples.csv`.
pub fn sibling(base: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    base.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn time_col(out: Output, t: f64) -> String {
    if out.timing {
        format!("{t:.6e}")
    } else {
        String::new()
    }
}

/// Describes a generated dataset next to its extended-XYZ file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Trajectory file, relative to the manifest.
    pub trajectory: String,
    pub frames: usize,
    /// Time between recorded frames, fs.
    pub frame_dt: f64,
    pub dataset: DatasetSpec,
    pub oracle: OracleSystem,
}

/// Runs the oracle and writes `out` (extended XYZ) plus `out` with a
/// `.json` extension (manifest).
pub fn gen_data(potential: &str, spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    let oracle = OracleSystem::load(potential)?;
    let traj = sim::gen_dataset(&oracle.potential, &oracle.system()?, spec)?;
    let mut w = create(out)?;
    xyz::write_trajectory(&mut w, &traj)?;
    w.flush()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        trajectory: out.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        frames: traj.len(),
        frame_dt: traj.dt,
        dataset: spec.clone(),
        oracle,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(out.with_extension("json"), text + "\n")?;
    Ok(manifest)
}

/// Labeled frames from a manifest (`.json`) or an extended-XYZ file.
pub fn load_data(path: &Path) -> Result<Trajectory> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Invalid(format!("{}: not a dataset manifest", path.display())));
        }
        let traj = xyz::load_trajectory(path.with_file_name(&m.trajectory))?;
        if traj.len() != m.frames {
            return Err(Error::Invalid(format!(
                "manifest lists {} frames, trajectory has {}",
                m.frames,
                traj.len()
            )));
        }
        if traj.systems()[0].atomic_numbers != m.oracle.atomic_numbers {
            return Err(Error::Invalid("trajectory species differ from the manifest".into()));
        }
        Ok(traj)
    } else {
        xyz::load_trajectory(path)
    }
}

/// Trains on `data` and writes `checkpoint.deqf`, `metrics.csv` and the
/// resolved `config.conf` into `out_dir`.
pub fn train(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let traj = load_data(data)?;
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("config.conf"))?;
    let outcome = train::train_loop(&traj.frames, &cfg.model, &cfg.solver, &cfg.train)?;
    outcome.checkpoint.save(out_dir.join("checkpoint.deqf"))?;
    let mut w = csv_file(&out_dir.join("metrics.csv"), "train")?;
    train::write_metrics_csv(&mut w, &outcome.log)?;
    w.flush()?;
    Ok(outcome)
}

/// Loads a checkpoint into a model plus the solver settings it was trained
/// with.
pub fn load_model(path: &Path) -> Result<(Model, SolverConfig)> {
    let ck = Checkpoint::load(path)?;
    let solver = ck.meta.solver.clone();
    Ok((ck.model()?, solver))
}

/// Writes the report (one row) to `report` and per-sample errors next to it
/// (`<stem>_samples.csv`).
pub fn eval(checkpoint: &Path, data: &Path, report: &Path, solver: Option<SolverConfig>, out: Output) -> Result<EvalReport> {
    let (model, trained) = load_model(checkpoint)?;
    let solver = solver.unwrap_or(trained);
    let traj = load_data(data)?;
    let samples = metrics::evaluate(&model, &traj.frames, &solver, max_threads())?;
    let name = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let rep = EvalReport::from_samples(name, &samples)?;
    let mut w = csv_file(report, "eval")?;
    writeln!(w, "{REPORT_HEADER}")?;
    writeln!(w, "{}", rep.csv_row(out.timing))?;
    w.flush()?;
    let mut w = csv_file(&sibling(report, "_samples", "csv"), "eval")?;
    metrics::write_samples_csv(&mut w, &samples)?;
    w.flush()?;
    Ok(rep)
}

/// Options of the `md` command.
#[derive(Debug, Clone)]
pub struct MdOptions {
    pub steps: usize,
    pub dt: f64,
    pub reuse: bool,
    pub eps_reuse: Option<f64>,
    /// Velocity temperature when the start frame has none, K.
    pub temperature: f64,
    pub seed: u64,
}

/// Model-driven MD from the first frame of `init`. Writes `<out>.xyz` and
/// `<out>_stats.csv`; a run cut short by a solver failure still writes
/// the frames up to the failure.
pub fn md(checkpoint: &Path, init: &Path, opts: &MdOptions, out: &Path) -> Result<Trajectory> {
    let (model, mut solver) = load_model(checkpoint)?;
    if let Some(eps) = opts.eps_reuse {
        solver.eps_reuse = eps;
    }
    solver.validate()?;
    let mut start = first_system(init)?;
    if start.velocities.is_none() {
        start = sim::maxwell_boltzmann(&start, opts.temperature, &mut ChaCha8Rng::seed_from_u64(opts.seed))?;
    }
    let mut ff = ModelForceField::new(&model, solver, opts.reuse);
    let traj = sim::run_md(&mut ff, &start, opts.steps, opts.dt)?;
    xyz::save_trajectory(out.with_extension("xyz"), &traj)?;
    let mut w = csv_file(&sibling(out, "_stats", "csv"), "md")?;
    traj.write_stats_csv(&mut w)?;
    w.flush()?;
    Ok(traj)
}

fn first_system(path: &Path) -> Result<AtomicSystem> {
    xyz::load_systems(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: no structures", path.display())))
}

/// Options of the `relax` command.
#[derive(Debug, Clone)]
pub struct RelaxOptions {
    pub steps: usize,
    pub step_size: f64,
    pub f_max: f64,
    pub reuse: bool,
}

pub const ABLATION_HEADER: &str = "FP reuse,eps_reuse,Time [s],Time std [s],# Solver steps,# Solver steps std,Mean final energy";

/// Column names follow the usual ablation table layout.
pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow], out: Output) -> std::io::Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        let e = metrics::mean(&r.final_energies);
        writeln!(
            w,
            "{},{:e},{},{},{:.6},{:.6},{:.10e}",
            if r.fp_reuse { "yes" } else { "no" },
            r.eps_reuse,
            time_col(out, r.time),
            time_col(out, r.time_std),
            r.mean_steps,
            r.std_steps,
            e
        )?;
    }
    Ok(())
}

/// Relaxes every structure in `init`. With `ablation`, runs the three-way
/// reuse ablation and writes its table to `out`; otherwise writes the
/// relaxed structures to `<out>.xyz` and a per-structure summary to `out`.
pub fn relax(checkpoint: &Path, init: &Path, opts: &RelaxOptions, ablation: bool, out: &Path, output: Output) -> Result<Option<Vec<AblationRow>>> {
    let (model, solver) = load_model(checkpoint)?;
    let systems = xyz::load_systems(init)?;
    if systems.is_empty() {
        return Err(Error::Invalid(format!("{}: no structures", init.display())));
    }
    if ablation {
        let rows = sim::relax_ablation(&model, &solver, &systems, opts.steps, opts.step_size, opts.f_max)?;
        let mut w = csv_file(out, "relax")?;
        write_ablation_csv(&mut w, &rows, output)?;
        w.flush()?;
        return Ok(Some(rows));
    }
    let mut w = csv_file(out, "relax")?;
    writeln!(w, "system,steps_taken,converged,initial_energy,final_energy,max_force,mean_solver_steps,time")?;
    let mut frames = Vec::new();
    for (i, s) in systems.iter().enumerate() {
        let mut ff = ModelForceField::new(&model, solver.clone(), opts.reuse);
        let r = sim::relax(&mut ff, s, opts.steps, opts.step_size, opts.f_max)?;
        if let Some(t) = &r.truncated {
            return Err(Error::Invalid(format!("structure {i}: relaxation stopped at step {}: {}", t.frame, t.reason)));
        }
        let fmax = r.forces.iter().map(|f| crate::vec3::norm(*f)).fold(0.0, f64::max);
        writeln!(
            w,
            "{i},{},{},{:.10e},{:.10e},{:.10e},{:.6},{}",
            r.steps_taken,
            r.converged as u8,
            r.energies[0],
            r.energy,
            fmax,
            r.mean_solver_steps(),
            time_col(output, r.wall_time)
        )?;
        frames.push(sim::Frame {
            system: r.system,
            energy: r.energy,
            forces: r.forces,
            stats: None,
        });
    }
    w.flush()?;
    let traj = Trajectory {
        frames,
        dt: 0.0,
        truncated: None,
    };
    xyz::save_trajectory(out.with_extension("xyz"), &traj)?;
    Ok(None)
}

/// Cold vs reuse inference along `traj`. Writes paired step histograms to
/// `out` and the per-frame deviation series to `<stem>_deviation.csv`.
pub fn bench_fpreuse(checkpoint: &Path, traj: &Path, solver: Option<SolverConfig>, out: &Path) -> Result<MarkovReport> {
    let (model, trained) = load_model(checkpoint)?;
    let solver = solver.unwrap_or(trained);
    let systems = xyz::load_systems(traj)?;
    let rep = sim::markov_deviation(&model, &systems, &solver)?;
    let cold = step_histogram(&rep.steps_cold)?;
    let warm = step_histogram(&rep.steps_reuse)?;
    let (pc, pw) = (cold.percentages(), warm.percentages());
    let mut keys: Vec<usize> = cold.counts.keys().chain(warm.counts.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let mut w = csv_file(out, "bench-fpreuse")?;
    writeln!(w, "steps,count_no_reuse,count_reuse,percent_no_reuse,percent_reuse")?;
    for k in keys {
        writeln!(
            w,
            "{k},{},{},{:.6},{:.6}",
            cold.counts.get(&k).unwrap_or(&0),
            warm.counts.get(&k).unwrap_or(&0),
            pc.get(&k).unwrap_or(&0.0),
            pw.get(&k).unwrap_or(&0.0)
        )?;
    }
    w.flush()?;
    let mut w = csv_file(&sibling(out, "_deviation", "csv"), "bench-fpreuse")?;
    rep.write_csv(&mut w)?;
    w.flush()?;
    Ok(rep)
}

pub const SWEEP_HEADER: &str = "tolerance,force_mae,force_mae_vs_reference,mean_time,mean_steps";

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow], out: Output) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{:e},{:.10e},{:.10e},{},{:.6}",
            r.tolerance,
            r.force_mae,
            r.force_mae_ref,
            time_col(out, r.mean_time),
            r.mean_steps
        )?;
    }
    Ok(())
}

pub fn sweep_tol(checkpoint: &Path, data: &Path, tols: &[f64], out: &Path, output: Output) -> Result<Vec<SweepRow>> {
    let (model, solver) = load_model(checkpoint)?;
    let traj = load_data(data)?;
    let rows = metrics::sweep_tolerance(&model, &traj.frames, &solver, tols, max_threads())?;
    let mut w = csv_file(out, "sweep-tol")?;
    write_sweep_csv(&mut w, &rows, output)?;
    w.flush()?;
    Ok(rows)
}

/// Parses `1e-4..1` (decades between the ends) or a comma list.
pub fn parse_tolerances(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad tolerance list '{text}'"));
    let parse = |s: &str| s.trim().parse::<f64>().ok().filter(|v| *v > 0.0 && v.is_finite()).ok_or_else(bad);
    if let Some((a, b)) = text.split_once("..") {
        let (lo, hi) = (parse(a)?, parse(b)?);
        if lo > hi {
            return Err(bad());
        }
        let (la, lb) = (lo.log10().round() as i32, hi.log10().round() as i32);
        if (10f64.powi(la) - lo).abs() > 1e-12 * lo || (10f64.powi(lb) - hi).abs() > 1e-12 * hi {
            return Err(Error::Config(format!("range ends must be powers of ten: '{text}'")));
        }
        return Ok((la..=lb).map(|k| format!("1e{k}").parse().unwrap()).collect());
    }
    text.split(',').map(parse).collect()
}
