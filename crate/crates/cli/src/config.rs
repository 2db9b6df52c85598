//! Flat run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use srgbflow::train::{LrSchedule, TrainConfig};
use srgbflow::{Error, Grid};

/// Effective configuration of one command. Written as `run_config.json` into
/// the output directory so the run can be repeated exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub model: String,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Training run directories holding `model.json` and checkpoints.
    pub checkpoints: Vec<PathBuf>,
    pub checkpoint_name: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_schedule: LrSchedule,
    pub clip_norm: Option<f64>,
    pub eval_interval: usize,
    pub max_steps: Option<usize>,
    pub threads: usize,
    /// Synthetic grid as `CxI`.
    pub cells: String,
    pub n_per_cell: usize,
    pub patch_size: usize,
    pub stride: Option<usize>,
    pub train_frac: f64,
    /// Full synthetic ISP description; replaces the grid options when set.
    pub synth_config: Option<PathBuf>,
    pub curves: bool,
    pub camera: Option<usize>,
    pub iso_index: Option<usize>,
    /// Patches per cell written as PNG by `sample`.
    pub count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            command: String::new(),
            model: "proposed".into(),
            dataset: None,
            out: None,
            checkpoints: Vec::new(),
            checkpoint_name: srgbflow::train::BEST_CHECKPOINT.into(),
            seed: 0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_schedule: t.lr_schedule,
            clip_norm: t.clip_norm,
            eval_interval: t.eval_interval,
            max_steps: t.max_steps,
            threads: 1,
            cells: "5x5".into(),
            n_per_cell: 200,
            patch_size: 32,
            stride: None,
            train_frac: 0.8,
            synth_config: None,
            curves: false,
            camera: None,
            iso_index: None,
            count: 8,
        }
    }
}

/// Options shared by every command. Each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Flat JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model name: proposed, proposed_s{S}_k{K}, a baseline or an ablation row
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Dataset directory (input PNG directory for `ingest`)
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training run directory; repeat to compare models
    #[arg(long = "checkpoint", global = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Checkpoint file inside each run directory
    #[arg(long, global = true)]
    pub checkpoint_name: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long = "batch", global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f32>,
    /// constant or cosine
    #[arg(long, global = true, value_parser = parse_schedule)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    /// Upper bound on worker threads
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Synthetic grid size, e.g. 5x5
    #[arg(long, global = true)]
    pub cells: Option<String>,
    #[arg(long, global = true)]
    pub n_per_cell: Option<usize>,
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[arg(long, global = true)]
    pub synth_config: Option<PathBuf>,
    /// Also write variance-versus-intensity curves
    #[arg(long, global = true)]
    pub curves: bool,
    #[arg(long, global = true)]
    pub camera: Option<usize>,
    #[arg(long, global = true)]
    pub iso_index: Option<usize>,
    #[arg(long, global = true)]
    pub count: Option<usize>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Reads the config file if one is given and applies the overrides.
    pub fn resolve(command: &str, o: &Overrides) -> Result<Self, Error> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if !c.command.is_empty() && c.command != command {
            return Err(config_err(format!("config is for `{}`, not `{command}`", c.command)));
        }
        c.command = command.to_string();
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &o.$f { c.$f = v.clone().into(); })*};
        }
        set!(model, dataset, out, checkpoint_name, seed, epochs, batch_size, lr, lr_schedule, max_steps, threads, cells, n_per_cell);
        set!(patch_size, stride, synth_config, camera, iso_index, count);
        if !o.checkpoints.is_empty() {
            c.checkpoints = o.checkpoints.clone();
        }
        c.curves |= o.curves;
        if c.threads == 0 {
            return Err(config_err("threads must be positive"));
        }
        if c.patch_size == 0 || c.n_per_cell == 0 || c.count == 0 {
            return Err(config_err("patch_size, n_per_cell and count must be positive"));
        }
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig, Error> {
        let t = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_schedule: self.lr_schedule,
            seed: self.seed,
            clip_norm: self.clip_norm,
            eval_interval: self.eval_interval,
            max_steps: self.max_steps,
            prefetch: self.threads,
            ..TrainConfig::default()
        };
        t.validate()?;
        Ok(t)
    }

    pub fn grid(&self) -> Result<Grid, Error> {
        parse_cells(&self.cells)
    }

    pub fn dataset(&self) -> Result<&Path, Error> {
        self.dataset.as_deref().ok_or_else(|| config_err(format!("`{}` needs --dataset", self.command)))
    }

    pub fn out(&self) -> Result<&Path, Error> {
        self.out.as_deref().ok_or_else(|| config_err(format!("`{}` needs --out", self.command)))
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ECHO_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn parse_schedule(s: &str) -> Result<LrSchedule, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown schedule `{s}`"))
}

pub const ECHO_FILE: &str = "run_config.json";

/// Parses `CxI`, e.g. `5x5`.
pub fn parse_cells(s: &str) -> Result<Grid, Error> {
    let bad = || config_err(format!("cells must look like 5x5, got `{s}`"));
    let (c, i) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (c, i): (usize, usize) = (c.trim().parse().map_err(|_| bad())?, i.trim().parse().map_err(|_| bad())?);
    if c == 0 || i == 0 {
        return Err(bad());
    }
    Ok(Grid::new(c, i))
}
