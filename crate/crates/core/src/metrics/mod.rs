//! Evaluation: NLL per dimension, marginal KL between real and sampled noise
//! histograms, per-cell noise std and variance-vs-intensity curves.

mod plot;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::Grid;
use crate::data::{assemble_batch, dequantize, DequantConfig, NoisePatchRecord};
use crate::error::{Error, Result};
use crate::model::FlowModel;

pub use plot::{svg_line_plot, Series};

pub const KL_BINS: usize = 256;
pub const KL_SMOOTHING: f64 = 1e-6;
pub const CURVE_BINS: usize = 64;
pub const CURVE_MIN_COUNT: usize = 100;

/// Histograms of real and sampled noise over uniform bins on `[-1, 1)`.
/// Values outside the range are counted in the edge bins.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramPair {
    pub n_bins: usize,
    pub counts_real: Vec<u64>,
    pub counts_sampled: Vec<u64>,
    pub smoothing_eps: f64,
}

fn histogram(values: &[f32], n_bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let b = ((v as f64 + 1.0) / 2.0 * n_bins as f64).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(n_bins - 1) };
        counts[b] += 1;
    }
    counts
}

impl HistogramPair {
    pub fn new(real: &[f32], sampled: &[f32], n_bins: usize, smoothing_eps: f64) -> Result<Self> {
        if real.is_empty() || sampled.is_empty() {
            return Err(Error::Data("marginal KL needs non-empty real and sampled sets".into()));
        }
        if n_bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        Ok(Self {
            n_bins,
            counts_real: histogram(real, n_bins),
            counts_sampled: histogram(sampled, n_bins),
            smoothing_eps,
        })
    }

    /// Lower edge of every bin plus the final upper edge.
    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.n_bins).map(|i| -1.0 + 2.0 * i as f64 / self.n_bins as f64).collect()
    }

    fn normalized(counts: &[u64], eps: f64) -> Vec<f64> {
        let total: f64 = counts.iter().map(|&c| c as f64 + eps).sum();
        counts.iter().map(|&c| (c as f64 + eps) / total).collect()
    }

    /// `D_KL(real || sampled)` of the smoothed histograms.
    pub fn kl(&self) -> f64 {
        let p = Self::normalized(&self.counts_real, self.smoothing_eps);
        let q = Self::normalized(&self.counts_sampled, self.smoothing_eps);
        p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum::<f64>().max(0.0)
    }
}

/// `D_KL(P_real || P_sampled)` on `n_bins` uniform bins over `[-1, 1)` with
/// the default smoothing.
pub fn marginal_kl(real: &[f32], sampled: &[f32], n_bins: usize) -> Result<f64> {
    Ok(HistogramPair::new(real, sampled, n_bins, KL_SMOOTHING)?.kl())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub kl_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            seed: 0,
            kl_bins: KL_BINS,
        }
    }
}

/// Real and sampled noise std of one (camera, ISO index) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStd {
    pub camera: usize,
    pub iso_index: usize,
    pub count: usize,
    pub real_std: f64,
    pub sampled_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll_per_dim: f64,
    pub d_kl: f64,
    /// Only cells present in the evaluated records.
    pub cells: Vec<CellStd>,
}

impl EvalReport {
    pub fn cell(&self, camera: usize, iso_index: usize) -> Option<&CellStd> {
        self.cells.iter().find(|c| c.camera == camera && c.iso_index == iso_index)
    }
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f32) {
        self.n += 1;
        self.sum += v as f64;
        self.sum_sq += (v as f64) * (v as f64);
    }

    fn std(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let mean = self.sum / self.n as f64;
        ((self.sum_sq - self.n as f64 * mean * mean) / (self.n - 1) as f64).max(0.0).sqrt()
    }
}

/// NLL per dimension on dequantized noise, marginal KL against one model
/// sample per real patch at the same context, and per-cell std.
pub fn eval_model(
    model: &FlowModel,
    records: &[NoisePatchRecord],
    iso_values: &[u32],
    dequant: DequantConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let grid = model.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let mut nll_sum = 0.0f64;
    let mut real = Vec::new();
    let mut sampled = Vec::new();
    let mut stats: BTreeMap<(usize, usize), (Moments, Moments, usize)> = BTreeMap::new();
    for chunk in records.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&NoisePatchRecord> = chunk.iter().collect();
        let batch = assemble_batch(&refs, grid, iso_values, dequant, &mut rng)?;
        nll_sum += model.nll_per_dim(&batch.noise, &batch.ctx)? as f64 * chunk.len() as f64;
        let s = model.sample(&batch.ctx, &mut sample_rng)?;
        let per = batch.noise.numel() / chunk.len();
        for (i, (&cam, &iso)) in batch.ctx.cameras.iter().zip(&batch.ctx.isos).enumerate() {
            let e = stats.entry((cam, iso)).or_default();
            e.2 += 1;
            for k in i * per..(i + 1) * per {
                e.0.push(batch.noise.data()[k]);
                e.1.push(s.data()[k]);
            }
        }
        real.extend_from_slice(batch.noise.data());
        sampled.extend_from_slice(s.data());
    }
    Ok(EvalReport {
        nll_per_dim: nll_sum / records.len() as f64,
        d_kl: marginal_kl(&real, &sampled, cfg.kl_bins)?,
        cells: stats
            .into_iter()
            .map(|((camera, iso_index), (r, s, count))| CellStd {
                camera,
                iso_index,
                count,
                real_std: r.std(),
                sampled_std: s.std(),
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub variance: f64,
    pub reliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityVarianceCurve {
    pub camera: usize,
    pub iso_index: usize,
    pub channel: usize,
    pub bins: Vec<IntensityBin>,
}

impl IntensityVarianceCurve {
    pub fn reliable(&self) -> impl Iterator<Item = &IntensityBin> {
        self.bins.iter().filter(|b| b.reliable)
    }

    /// Max over min variance of well-populated bins with non-zero variance.
    pub fn spread_ratio(&self) -> Option<f64> {
        let v: Vec<f64> = self.reliable().map(|b| b.variance).filter(|&v| v > 0.0).collect();
        let max = v.iter().cloned().fold(f64::NAN, f64::max);
        let min = v.iter().cloned().fold(f64::NAN, f64::min);
        (v.len() >= 2).then(|| max / min)
    }

    /// Least-squares line `variance = slope * intensity + intercept` through
    /// the reliable bin centers; returns `(slope, intercept, r_squared)`.
    pub fn linear_fit(&self) -> Option<(f64, f64, f64)> {
        let pts: Vec<(f64, f64)> = self.reliable().map(|b| (0.5 * (b.lo + b.hi), b.variance)).collect();
        if pts.len() < 3 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
        Some((slope, intercept, r2))
    }
}

/// Per-intensity-bin sample variance of `noise` against `clean` in `[0,1)`.
pub fn variance_vs_intensity(
    clean: &[f32],
    noise: &[f32],
    n_bins: usize,
    min_count: usize,
    cell: (usize, usize),
    channel: usize,
) -> Result<IntensityVarianceCurve> {
    if clean.is_empty() || clean.len() != noise.len() {
        return Err(Error::Data("variance curve needs equally many non-zero clean and noise values".into()));
    }
    let mut m: Vec<Moments> = (0..n_bins).map(|_| Moments::default()).collect();
    for (&c, &n) in clean.iter().zip(noise) {
        let b = ((c as f64 * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        m[b].push(n);
    }
    Ok(IntensityVarianceCurve {
        camera: cell.0,
        iso_index: cell.1,
        channel,
        bins: m
            .iter()
            .enumerate()
            .map(|(i, mo)| IntensityBin {
                lo: i as f64 / n_bins as f64,
                hi: (i + 1) as f64 / n_bins as f64,
                count: mo.n,
                variance: mo.std().powi(2),
                reliable: mo.n >= min_count,
            })
            .collect(),
    })
}

/// Dequantized `(clean, noise)` values of one channel over the records of a
/// cell.
pub fn channel_values(
    records: &[NoisePatchRecord],
    camera: u32,
    iso: u32,
    channel: usize,
    dequant: DequantConfig,
    seed: u64,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = Vec::new();
    let mut noise = Vec::new();
    for r in records.iter().filter(|r| r.camera == camera && r.iso == iso) {
        let d = dequantize(r, dequant, &mut rng)?;
        let n = r.height * r.width;
        clean.extend_from_slice(&d.clean.data()[channel * n..(channel + 1) * n]);
        noise.extend_from_slice(&d.noise.data()[channel * n..(channel + 1) * n]);
    }
    if clean.is_empty() {
        return Err(Error::Data(format!("no records for camera {camera}, iso {iso}")));
    }
    Ok((clean, noise))
}

/// One summary row per evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub params: usize,
    pub nll_per_dim: f64,
    pub d_kl: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cell_std_csv(path: &Path, model: &str, grid: Grid, report: &EvalReport) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "model,camera,iso_index,count,real_std,sampled_std")?;
    for c in 0..grid.n_cam {
        for i in 0..grid.n_iso {
            match report.cell(c, i) {
                Some(s) => writeln!(f, "{model},{c},{i},{},{},{}", s.count, s.real_std, s.sampled_std)?,
                None => writeln!(f, "{model},{c},{i},0,absent,absent")?,
            }
        }
    }
    Ok(())
}

pub fn write_curve_csv(path: &Path, curves: &[(&str, &IntensityVarianceCurve)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "source,camera,iso_index,channel,bin_lo,bin_hi,count,variance,reliable")?;
    for (name, c) in curves {
        for b in &c.bins {
            writeln!(
                f,
                "{name},{},{},{},{},{},{},{},{}",
                c.camera, c.iso_index, c.channel, b.lo, b.hi, b.count, b.variance, b.reliable
            )?;
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
