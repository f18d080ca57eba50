use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use deqff::app::{self, MdOptions, Output, RelaxOptions};
use deqff::config::RunConfig;
use deqff::sim::DatasetSpec;

#[derive(Parser)]
#[command(name = "deqff", version, about = "Deep-equilibrium equivariant force field")]
struct Cli {
    /// Leave wall-clock columns empty so reruns give byte-identical CSVs.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled trajectory with the oracle potential.
    GenData {
        /// Preset name or JSON oracle description.
        #[arg(long, default_value = "water")]
        potential: String,
        #[arg(long, default_value_t = 2000)]
        frames: usize,
        /// Integrator step, fs.
        #[arg(long, default_value_t = 0.5)]
        dt: f64,
        /// Integrator steps between recorded frames.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Initial temperature, K.
        #[arg(long, default_value_t = 500.0)]
        temp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extended-XYZ output; the manifest goes next to it as .json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest (.json) or extended-XYZ file.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on labeled frames.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Model-driven molecular dynamics.
    Md {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Starting structure (first frame is used).
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        dt: f64,
        #[arg(long, value_enum, default_value = "on")]
        reuse: Switch,
        #[arg(long)]
        eps_reuse: Option<f64>,
        /// Velocity temperature when the start frame has none, K.
        #[arg(long, default_value_t = 300.0)]
        temp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix: <out>.xyz and <out>_stats.csv.
        #[arg(long, default_value = "md")]
        out: PathBuf,
    },
    /// Steepest-descent relaxation.
    Relax {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Structures to relax (all frames).
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Å²/eV.
        #[arg(long, default_value_t = 0.01)]
        step_size: f64,
        #[arg(long, default_value_t = 0.0)]
        f_max: f64,
        /// Run the three-way reuse ablation.
        #[arg(long)]
        ablation: bool,
        #[arg(long, value_enum, default_value = "on")]
        reuse: Switch,
        #[arg(long, default_value = "relax.csv")]
        out: PathBuf,
    },
    /// Solver steps with and without fixed-point reuse along a trajectory.
    BenchFpreuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        eps_reuse: Option<f64>,
        #[arg(long, default_value = "fpreuse.csv")]
        out: PathBuf,
    },
    /// Force error and cost across solver tolerances.
    SweepTol {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `1e-4..1` for decades, or a comma list.
        #[arg(long, default_value = "1e-4..1")]
        tols: String,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> deqff::Result<()> {
    let output = Output { timing: !cli.no_timing };
    match cli.cmd {
        Cmd::GenData {
            potential,
            frames,
            dt,
            stride,
            temp,
            seed,
            out,
        } => {
            let spec = DatasetSpec {
                frames,
                dt,
                temperature: temp,
                seed,
                stride,
                ..Default::default()
            };
            let m = app::gen_data(&potential, &spec, &out)?;
            log::info!("wrote {} frames of {} to {}", m.frames, m.oracle.name, out.display());
        }
        Cmd::Train { config, data, out } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let o = app::train(&cfg, &data, &out)?;
            if let Some(last) = o.log.iter().rev().find(|r| r.split == "val") {
                log::info!("final validation force MAE {:.4e}", last.force_mae);
            }
        }
        Cmd::Eval { checkpoint, data, report } => {
            let r = app::eval(&checkpoint, &data, &report, None, output)?;
            log::info!("force MAE {:.4e}, mean steps {:.2}", r.force_mae, r.mean_steps);
        }
        Cmd::Md {
            checkpoint,
            init,
            steps,
            dt,
            reuse,
            eps_reuse,
            temp,
            seed,
            out,
        } => {
            let opts = MdOptions {
                steps,
                dt,
                reuse: matches!(reuse, Switch::On),
                eps_reuse,
                temperature: temp,
                seed,
            };
            let traj = app::md(&checkpoint, &init, &opts, &out)?;
            if let Some(t) = &traj.truncated {
                return Err(deqff::Error::Invalid(format!("MD stopped at frame {}: {}", t.frame, t.reason)));
            }
        }
        Cmd::Relax {
            checkpoint,
            init,
            steps,
            step_size,
            f_max,
            ablation,
            reuse,
            out,
        } => {
            let opts = RelaxOptions {
                steps,
                step_size,
                f_max,
                reuse: matches!(reuse, Switch::On),
            };
            app::relax(&checkpoint, &init, &opts, ablation, &out, output)?;
        }
        Cmd::BenchFpreuse {
            checkpoint,
            traj,
            eps_reuse,
            out,
        } => {
            let solver = match eps_reuse {
                Some(eps) => {
                    let (_, mut s) = app::load_model(&checkpoint)?;
                    s.eps_reuse = eps;
                    Some(s)
                }
                None => None,
            };
            let r = app::bench_fpreuse(&checkpoint, &traj, solver, &out)?;
            log::info!("mean relative force deviation {:.3e}", r.mean);
        }
        Cmd::SweepTol {
            checkpoint,
            data,
            tols,
            out,
        } => {
            let tols = app::parse_tolerances(&tols)?;
            app::sweep_tol(&checkpoint, &data, &tols, &out, output)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
