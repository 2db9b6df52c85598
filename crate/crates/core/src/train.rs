//! Maximum-likelihood training with Adam, per-epoch validation, checkpoints
//! and a reproducible CSV log.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use srgbflow_autodiff::{adam_step, clip_global_norm, AdamConfig, AdamState, Graph, ParamGrads, Tensor};

use crate::context::{BoundContext, ConditioningContext, ContextBatch};
use crate::data::{BatchLoader, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{eval_model, EvalConfig, EvalReport};
use crate::model::FlowModel;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const LOG_FILE: &str = "log.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// Learning-rate schedule over all optimizer steps of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Validate every this many epochs; the final epoch is always validated.
    pub eval_interval: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub prefetch: usize,
    pub kl_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            seed: 0,
            clip_norm: None,
            eval_interval: 1,
            max_steps: None,
            prefetch: 2,
            kl_bins: crate::metrics::KL_BINS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be a positive number");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0,1) and eps must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if self.kl_bins == 0 {
            return bad("kl_bins must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Learning rate of optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())) as f32
            }
        }
    }

    /// Optimizer steps of a run over `n_train` records.
    pub fn total_steps(&self, n_train: usize) -> usize {
        let full = self.epochs * n_train.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            batch_size: self.batch_size,
            seed: self.seed ^ 0x5eed_e7a1,
            kl_bins: self.kl_bins,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_nll: f64,
    pub val: Option<EvalReport>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_nll: Option<f64>,
    pub steps: usize,
}

impl TrainLog {
    pub fn final_val(&self) -> Option<&EvalReport> {
        self.epochs.iter().rev().find_map(|e| e.val.as_ref())
    }

    /// Rows of `log.csv`: losses, KL and per-cell sampled std. Contains no
    /// timing so identical runs produce identical bytes.
    pub fn to_csv(&self, grid: crate::Grid) -> String {
        let mut s = String::from("epoch,steps,train_nll,val_nll,val_dkl");
        for (c, i) in grid.cells() {
            s.push_str(&format!(",std_c{c}_i{i}"));
        }
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}", e.epoch, e.steps, e.train_nll));
            match &e.val {
                Some(v) => {
                    s.push_str(&format!(",{},{}", v.nll_per_dim, v.d_kl));
                    for (c, i) in grid.cells() {
                        match v.cell(c, i) {
                            Some(cell) => s.push_str(&format!(",{}", cell.sampled_std)),
                            None => s.push_str(",absent"),
                        }
                    }
                }
                None => {
                    s.push_str(",,");
                    s.push_str(&",".repeat(grid.cells().count()));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,wall_seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{}\n", e.epoch, e.wall_seconds));
        }
        s
    }
}

/// NLL per dimension of a batch and its gradient for every parameter.
pub fn loss_and_gradients(model: &FlowModel, noise: &Tensor, ctx: &ContextBatch) -> Result<(f32, ParamGrads)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let bound = BoundContext::bind(&mut g, ctx);
    let x = g.constant(noise.clone());
    let loss = model.nll_graph(&mut g, &p, x, &bound)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    Ok((value, p.gradients(&g, &grads)))
}

/// One gradient step on a batch; returns the loss before the update. On a
/// non-finite loss or gradient the parameters are left untouched.
pub fn train_step(model: &mut FlowModel, noise: &Tensor, ctx: &ContextBatch, adam: &mut AdamState, clip: Option<f64>) -> Result<f32> {
    let (value, mut pg) = loss_and_gradients(model, noise, ctx)?;
    if let Some((name, _)) = pg.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFiniteLoss {
            layer: format!("gradient of {name}"),
        });
    }
    if let Some(c) = clip {
        clip_global_norm(&mut pg, c);
    }
    adam_step(model.params_mut(), &pg, adam)?;
    Ok(value)
}

fn write_logs(dir: &Path, log: &TrainLog, grid: crate::Grid) -> Result<()> {
    fs::write(dir.join(LOG_FILE), log.to_csv(grid))?;
    fs::write(dir.join(TIMING_FILE), log.timing_csv())?;
    Ok(())
}

/// Trains `model` on the dataset's train split and validates on its val
/// split. When `out_dir` is given, writes `model.json`, the init, last and
/// best checkpoints, `log.csv` and `timing.csv`. On a numeric failure the
/// last good parameters are saved before the error is returned.
pub fn train(model: &mut FlowModel, dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.grid() != model.grid() {
        return Err(Error::Config(format!(
            "model grid {:?} does not match dataset grid {:?}",
            model.grid(),
            dataset.grid()
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if dataset.val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    if let Some(d) = out_dir {
        model.save(d, INIT_CHECKPOINT)?;
        model.save(d, LAST_CHECKPOINT)?;
    }
    let grid = dataset.grid();
    let iso_values = dataset.manifest.iso_values.clone();
    let dequant = model.spec().dequant;
    let records = Arc::new(dataset.train.clone());
    let mut adam = AdamState::new(model.params(), cfg.adam());
    let total_steps = cfg.total_steps(records.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_nll: None,
        steps: 0,
    };
    let start = Instant::now();
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let loader_seed = shuffle_rng.next_u64();
        let loader = BatchLoader::spawn(
            Arc::clone(&records),
            order,
            cfg.batch_size,
            grid,
            iso_values.clone(),
            dequant,
            loader_seed,
            cfg.prefetch,
        );
        let (mut sum, mut count) = (0.0f64, 0usize);
        let mut stopped = false;
        for batch in loader {
            if cfg.max_steps.is_some_and(|m| log.steps >= m) {
                stopped = true;
                break;
            }
            let batch = batch?;
            let n = batch.ctx.len();
            adam.config.lr = cfg.lr_at(log.steps, total_steps);
            match train_step(model, &batch.noise, &batch.ctx, &mut adam, cfg.clip_norm) {
                Ok(l) => {
                    sum += l as f64 * n as f64;
                    count += n;
                    log.steps += 1;
                }
                Err(e) => {
                    if let Some(d) = out_dir {
                        model.save(d, LAST_CHECKPOINT)?;
                        write_logs(d, &log, grid)?;
                    }
                    return Err(e);
                }
            }
        }
        let last = epoch == cfg.epochs || stopped || cfg.max_steps.is_some_and(|m| log.steps >= m);
        let val = if epoch % cfg.eval_interval == 0 || last {
            Some(eval_model(model, &dataset.val, &iso_values, dequant, &cfg.eval_config())?)
        } else {
            None
        };
        if let Some(v) = &val {
            if log.best_val_nll.is_none_or(|b| v.nll_per_dim < b) {
                log.best_val_nll = Some(v.nll_per_dim);
                log.best_epoch = Some(epoch);
                if let Some(d) = out_dir {
                    model.save(d, BEST_CHECKPOINT)?;
                }
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            steps: log.steps,
            train_nll: if count > 0 { sum / count as f64 } else { f64::NAN },
            val,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(d) = out_dir {
            model.save(d, LAST_CHECKPOINT)?;
            write_logs(d, &log, grid)?;
        }
        if last {
            break 'epochs;
        }
    }
    Ok(log)
}

/// Draws `n` noise samples for a single context.
pub fn sample_noise<R: RngCore + ?Sized>(model: &FlowModel, ctx: &ConditioningContext, n: usize, rng: &mut R) -> Result<Tensor> {
    let batch = ContextBatch::repeat(ctx, model.grid(), n)?;
    model.sample(&batch, rng)
}

/// Evaluates saved parameters against a dataset split.
pub fn evaluate(model: &FlowModel, dataset: &Dataset, split: crate::data::Split, cfg: &EvalConfig) -> Result<EvalReport> {
    eval_model(model, dataset.split(split), &dataset.manifest.iso_values, model.spec().dequant, cfg)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(report)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}
