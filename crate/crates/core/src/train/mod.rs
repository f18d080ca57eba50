//! Losses, learning-rate schedule, optimizer, the training loop and
//! checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, FORMAT_VERSION, MAGIC};
pub use optim::{clip_grad_norm, optimizer_step, AdamState, AdamWConfig};

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deq::{sample_dropout_mask, DeqContext, SolverConfig};
use crate::eqnet::ModelConfig;
use crate::error::{Error, Result};
use crate::grad::{correction_gradients, ift_backward};
use crate::metrics::{evaluate, force_mae, mean, median};
use crate::model::Model;
use crate::parallel::{map_ordered, max_threads};
use crate::sim::Frame;
use crate::vec3::{norm, sub, Vec3};

/// RNG streams derived from the one seed.
const STREAM_SPLIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_f: f64,
    pub lambda_e: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// May be fractional.
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Fraction of frames held out for validation.
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_f: 80.0,
            lambda_e: 1.0,
            batch_size: 4,
            epochs: 1000,
            lr_initial: 1e-6,
            lr_max: 5e-4,
            lr_min: 1e-6,
            warmup_epochs: 10.0,
            weight_decay: 5e-3,
            grad_clip: 1000.0,
            seed: 0,
            val_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda_f > 0.0 && self.lambda_e > 0.0) {
            return bad("loss weights must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_initial && self.lr_initial <= self.lr_max) {
            return bad("need 0 < lr_min <= lr_initial <= lr_max");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        if !(self.warmup_epochs >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("warmup, weight decay and clip must be nonnegative (clip positive)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps >= 0.0) {
            return bad("AdamW betas must be in [0, 1)");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Loss value and its exact cotangents.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    /// Mean over atoms of `‖F_pred - F_gt‖`.
    pub force: f64,
    /// `|E_pred - E_gt|`.
    pub energy: f64,
    pub d_energy: f64,
    pub d_forces: Vec<Vec3>,
}

/// `λ_F mean_i ‖ΔF_i‖ + λ_E |ΔE|`. At a zero error the subgradient 0 is
/// used.
pub fn loss(e_pred: f64, f_pred: &[Vec3], e_gt: f64, f_gt: &[Vec3], cfg: &TrainConfig) -> Result<LossTerms> {
    if f_pred.len() != f_gt.len() || f_pred.is_empty() {
        return Err(Error::LayoutMismatch(format!("{} predicted forces for {} targets", f_pred.len(), f_gt.len())));
    }
    let n = f_pred.len() as f64;
    let mut force = 0.0;
    let mut d_forces = Vec::with_capacity(f_pred.len());
    for (p, g) in f_pred.iter().zip(f_gt) {
        let d = sub(*p, *g);
        let r = norm(d);
        force += r;
        let s = if r > 0.0 { cfg.lambda_f / (n * r) } else { 0.0 };
        d_forces.push([d[0] * s, d[1] * s, d[2] * s]);
    }
    force /= n;
    let de = e_pred - e_gt;
    let energy = de.abs();
    let d_energy = if de > 0.0 {
        cfg.lambda_e
    } else if de < 0.0 {
        -cfg.lambda_e
    } else {
        0.0
    };
    Ok(LossTerms {
        total: cfg.lambda_f * force + cfg.lambda_e * energy,
        force,
        energy,
        d_energy,
        d_forces,
    })
}

/// Step-indexed schedule: linear warmup from `lr_initial` to `lr_max`,
/// then cosine decay to `lr_min` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub max: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        let total = (cfg.epochs * steps_per_epoch).max(1) as u64;
        let warmup = ((cfg.warmup_epochs * steps_per_epoch as f64).round() as u64).min(total - 1);
        Self {
            initial: cfg.lr_initial,
            max: cfg.lr_max,
            min: cfg.lr_min,
            warmup_steps: warmup,
            total_steps: total,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.initial + (self.max - self.initial) * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(self.warmup_steps);
        let t = if span == 0 {
            1.0
        } else {
            ((step - self.warmup_steps) as f64 / span as f64).min(1.0)
        };
        self.min + 0.5 * (self.max - self.min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub fn lr_schedule(step: u64, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    LrSchedule::new(cfg, steps_per_epoch).at(step)
}

/// Gradient and diagnostics of one training sample.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub grads: Vec<f64>,
    pub loss: LossTerms,
    pub correction_loss: f64,
    pub steps: usize,
    pub adjoint_steps: usize,
    pub force_mae: f64,
}

/// Cold solve at `eps_train` (recording correction iterates), heads and
/// loss, then the IFT gradient plus correction gradients. Any
/// unconverged solve is an error.
pub fn sample_gradient(
    model: &Model,
    frame: &Frame,
    solver: &SolverConfig,
    cfg: &TrainConfig,
    mask_seed: u64,
) -> Result<SampleGrad> {
    let net = &model.net;
    let geom = net.geometry(&frame.system)?;
    let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mask = sample_dropout_mask(geom.edges.len(), net.cfg.path_dropout, &mut mrng);
    let ctx = DeqContext::with_geometry(net, &model.params, geom, mask)?;
    let z0 = vec![0.0; ctx.dim()];
    let state = ctx.solve(&z0, solver, solver.eps_train, solver.correction_samples)?;
    if !state.converged {
        return Err(Error::Unconverged {
            steps: state.steps,
            residual: state.residual,
            tolerance: state.tolerance,
        });
    }
    let head_loss = |y: &[f64], d_y: &mut [f64], grads: &mut [f64]| -> Result<LossTerms> {
        let (e, f, tape) = ctx.heads_taped(y);
        let l = loss(e + model.energy_offset, &f, frame.energy, &frame.forces, cfg)?;
        ctx.heads_vjp(y, &tape, l.d_energy, &l.d_forces, d_y, Some(grads));
        Ok(l)
    };
    let mut grads = vec![0.0; model.params.len()];
    let mut d_z = vec![0.0; ctx.dim()];
    let main = head_loss(&state.z, &mut d_z, &mut grads)?;
    let fmae = force_mae(&ctx.heads(&state.z).1, &frame.forces)?;
    let at = ctx.linearize(&state.z);
    let ift = ift_backward(&ctx, &at, &d_z, solver)?;
    let mut failure = None;
    let (corr, correction_loss) = correction_gradients(&ctx, &state.sampled, |y, d_y, g| match head_loss(y, d_y, g) {
        Ok(l) => l.total,
        Err(err) => {
            failure = Some(err);
            0.0
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    for ((g, a), b) in grads.iter_mut().zip(&ift.grads).zip(&corr.grads) {
        *g += a + b;
    }
    Ok(SampleGrad {
        grads,
        loss: main,
        correction_loss,
        steps: state.steps,
        adjoint_steps: ift.adjoint.map_or(0, |a| a.steps),
        force_mae: fmae,
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `train` (this epoch), `train_running` (all epochs so far) or `val`.
    pub split: String,
    pub force_mae: f64,
    pub energy_mae: f64,
    pub mean_steps: f64,
    pub median_steps: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,force_mae,energy_mae,mean_steps,lr";

pub fn write_metrics_csv<W: Write>(mut w: W, log: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in log {
        writeln!(
            w,
            "{},{},{:.10e},{:.10e},{:.6},{:.6e}",
            r.epoch, r.split, r.force_mae, r.energy_mae, r.mean_steps, r.lr
        )?;
    }
    Ok(())
}

/// Seeded split into `(train, val)` index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SPLIT);
    idx.shuffle(&mut rng);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub model: Model,
}

/// Trains a fresh model on `dataset`. Energies are shifted by the mean
/// training energy. Each epoch logs the training statistics of that epoch,
/// the running statistics since the start, and a validation pass; epoch 0
/// holds the validation statistics of the untrained model.
pub fn train_loop(dataset: &[Frame], model_cfg: &ModelConfig, solver: &SolverConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    solver.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction, cfg.seed);
    let offset = mean(&train_idx.iter().map(|&i| dataset[i].energy).collect::<Vec<_>>());
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    model.energy_offset = offset;
    let threads = max_threads();
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg, steps_per_epoch);
    let adamw = cfg.adamw();
    let mut adam = AdamState::new(model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_TRAIN);
    let val_frames: Vec<Frame> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut log = Vec::new();
    let validate = |model: &Model, epoch: usize, lr: f64, log: &mut Vec<EpochRecord>| -> Result<()> {
        if val_frames.is_empty() {
            return Ok(());
        }
        let s = evaluate(model, &val_frames, solver, threads)?;
        let steps: Vec<f64> = s.iter().map(|x| x.steps as f64).collect();
        log.push(EpochRecord {
            epoch,
            split: "val".into(),
            force_mae: mean(&s.iter().map(|x| x.force_mae).collect::<Vec<_>>()),
            energy_mae: mean(&s.iter().map(|x| x.energy_error.abs()).collect::<Vec<_>>()),
            mean_steps: mean(&steps),
            median_steps: median(&steps),
            lr,
        });
        Ok(())
    };
    validate(&model, 0, schedule.at(0), &mut log)?;
    let mut order = train_idx.clone();
    let mut step: u64 = 0;
    let (mut run_f, mut run_e, mut run_steps) = (Vec::new(), Vec::new(), Vec::new());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ep_f, mut ep_e, mut ep_steps) = (Vec::new(), Vec::new(), Vec::new());
        let mut lr = schedule.at(step);
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.next_u64())).collect();
            let results = map_ordered(&jobs, threads, |_, &(i, seed)| sample_gradient(&model, &dataset[i], solver, cfg, seed));
            let mut grads = vec![0.0; model.params.len()];
            let scale = 1.0 / jobs.len() as f64;
            for (r, &(i, _)) in results.into_iter().zip(&jobs) {
                let r = r.map_err(|e| match e {
                    Error::Unconverged { .. } | Error::Diverged { .. } => {
                        log::error!("epoch {epoch}, frame {i}: {e}");
                        e
                    }
                    other => other,
                })?;
                for (g, s) in grads.iter_mut().zip(&r.grads) {
                    *g += s * scale;
                }
                ep_f.push(r.force_mae);
                ep_e.push(r.loss.energy);
                ep_steps.push(r.steps as f64);
            }
            if !grads.iter().all(|g| g.is_finite()) {
                return Err(Error::Invalid(format!("non-finite gradient at epoch {epoch}")));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            lr = schedule.at(step);
            optimizer_step(&mut model.params.data, &grads, &mut adam, lr, &adamw);
            step += 1;
        }
        run_f.extend_from_slice(&ep_f);
        run_e.extend_from_slice(&ep_e);
        run_steps.extend_from_slice(&ep_steps);
        log.push(EpochRecord {
            epoch,
            split: "train".into(),
            force_mae: mean(&ep_f),
            energy_mae: mean(&ep_e),
            mean_steps: mean(&ep_steps),
            median_steps: median(&ep_steps),
            lr,
        });
        log.push(EpochRecord {
            epoch,
            split: "train_running".into(),
            force_mae: mean(&run_f),
            energy_mae: mean(&run_e),
            mean_steps: mean(&run_steps),
            median_steps: median(&run_steps),
            lr,
        });
        validate(&model, epoch, lr, &mut log)?;
        if let Some(v) = log.last().filter(|r| r.split == "val") {
            log::info!(
                "epoch {epoch}: train force MAE {:.4e}, val force MAE {:.4e}, median steps {}",
                mean(&ep_f),
                v.force_mae,
                median(&ep_steps)
            );
        }
    }
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            model: model_cfg.clone(),
            solver: solver.clone(),
            train: cfg.clone(),
            energy_offset: model.energy_offset,
            epoch: cfg.epochs,
            step,
        },
        params: model.params.clone(),
        optimizer: Some(adam),
        rng: Some(RngState::capture(&rng)),
    };
    Ok(TrainOutcome { checkpoint, log, model })
}
