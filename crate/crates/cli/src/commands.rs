use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srgbflow::data::{self, assemble_batch, Batch, Dataset, NoisePatchRecord, SynthIspConfig};
use srgbflow::metrics::{
    eval_model, svg_line_plot, variance_vs_intensity, write_cell_std_csv, write_curve_csv, write_metrics_csv, EvalConfig,
    IntensityVarianceCurve, MetricsRow, Series, CURVE_BINS, CURVE_MIN_COUNT,
};
use srgbflow::train::{self, LAST_CHECKPOINT};
use srgbflow::{zoo, Error, FlowModel, Grid};

use crate::config::RunConfig;

pub const SYNTH_SIDECAR: &str = "synth_config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SAMPLE_STD_FILE: &str = "sample_std.csv";

fn synth_config(cfg: &RunConfig) -> Result<SynthIspConfig> {
    let mut s = match &cfg.synth_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => {
            let g = cfg.grid()?;
            let mut s = SynthIspConfig::default_grid(g.n_cam, g.n_iso);
            s.n_per_cell = cfg.n_per_cell;
            s.patch_size = cfg.patch_size;
            s.train_frac = cfg.train_frac;
            s
        }
    };
    s.seed = cfg.seed;
    s.validate()?;
    Ok(s)
}

pub fn synth_data(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let synth = synth_config(cfg)?;
    let (ds, warnings) = data::generate(&synth)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    ds.write(out)?;
    fs::write(out.join(SYNTH_SIDECAR), serde_json::to_string_pretty(&synth)? + "\n")?;
    cfg.echo(out)?;
    println!(
        "wrote {} train and {} val patches ({} cells) to {}",
        ds.train.len(),
        ds.val.len(),
        ds.manifest.cells.len(),
        out.display()
    );
    Ok(())
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let input = cfg.dataset()?;
    let out = cfg.out()?;
    let records = data::ingest_png_dir(input, cfg.patch_size, cfg.stride.unwrap_or(cfg.patch_size))?;
    let n_cam = records.iter().map(|r| r.camera as usize + 1).max().unwrap_or(0);
    let isos: Vec<u32> = records.iter().map(|r| r.iso).collect::<BTreeSet<_>>().into_iter().collect();
    let keys: Vec<(u32, u32)> = records.iter().map(|r| (r.camera, r.iso)).collect();
    let split = data::stratified_split(&keys, cfg.train_frac, cfg.seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let ds = Dataset::from_records(records, &split.splits, n_cam, isos)?;
    ds.write(out)?;
    cfg.echo(out)?;
    println!("ingested {} train and {} val patches to {}", ds.train.len(), ds.val.len(), out.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.dataset()?;
    Dataset::load(dir).with_context(|| format!("dataset {}", dir.display()))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let tcfg = cfg.train_config()?;
    let out = cfg.out()?;
    let ds = load_dataset(cfg)?;
    let spec = zoo::model_spec(&cfg.model, ds.grid())?;
    let mut model = FlowModel::new(spec, cfg.seed)?;
    cfg.echo(out)?;
    let log = train::train(&mut model, &ds, &tcfg, Some(out))?;
    if let Some(v) = log.final_val() {
        train::write_report_json(&out.join(REPORT_FILE), v)?;
        println!(
            "{}: {} params, {} steps, val nll/dim {:.5}, d_kl {:.5}, best epoch {}",
            model.spec().name,
            model.num_params(),
            log.steps,
            v.nll_per_dim,
            v.d_kl,
            log.best_epoch.unwrap_or(0)
        );
    }
    Ok(())
}

/// Models named on the command line: saved runs, or a freshly initialized
/// model when no run directory is given.
fn models(cfg: &RunConfig, grid: Grid) -> Result<Vec<(String, FlowModel)>> {
    let mut out: Vec<(String, FlowModel)> = Vec::new();
    if cfg.checkpoints.is_empty() {
        let m = FlowModel::new(zoo::model_spec(&cfg.model, grid)?, cfg.seed)?;
        out.push((m.spec().name.clone(), m));
    }
    for dir in &cfg.checkpoints {
        let m = FlowModel::load(dir, &cfg.checkpoint_name)
            .or_else(|_| FlowModel::load(dir, LAST_CHECKPOINT))
            .with_context(|| format!("run {}", dir.display()))?;
        if m.grid() != grid {
            return Err(Error::Config(format!(
                "{} was trained on a {}x{} grid, dataset has {}x{}",
                dir.display(),
                m.grid().n_cam,
                m.grid().n_iso,
                grid.n_cam,
                grid.n_iso
            ))
            .into());
        }
        let mut label = m.spec().name.clone();
        if out.iter().any(|(l, _)| *l == label) {
            label = format!("{label}@{}", dir.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default());
        }
        out.push((label, m));
    }
    Ok(out)
}

fn file_label(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let ds = load_dataset(cfg)?;
    let models = models(cfg, ds.grid())?;
    cfg.echo(out)?;
    let ecfg = EvalConfig {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..EvalConfig::default()
    };
    let mut rows = Vec::new();
    for (label, m) in &models {
        let report = eval_model(m, &ds.val, &ds.manifest.iso_values, m.spec().dequant, &ecfg)?;
        let name = file_label(label);
        write_cell_std_csv(&out.join(format!("cell_std_{name}.csv")), label, ds.grid(), &report)?;
        train::write_report_json(&out.join(format!("report_{name}.json")), &report)?;
        rows.push(MetricsRow {
            model: label.clone(),
            params: m.num_params(),
            nll_per_dim: report.nll_per_dim,
            d_kl: report.d_kl,
        });
    }
    rows.sort_by(|a, b| a.nll_per_dim.total_cmp(&b.nll_per_dim));
    write_metrics_csv(&out.join(METRICS_FILE), &rows)?;
    for r in &rows {
        println!("{}\t{}\t{:.5}\t{:.5}", r.model, r.params, r.nll_per_dim, r.d_kl);
    }
    if cfg.curves {
        write_curves(cfg, &ds, &models, &out.join("curves"))?;
    }
    Ok(())
}

pub fn curves(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let ds = load_dataset(cfg)?;
    let models = if cfg.checkpoints.is_empty() { Vec::new() } else { models(cfg, ds.grid())? };
    cfg.echo(out)?;
    let n = write_curves(cfg, &ds, &models, out)?;
    println!("wrote {n} curve files to {}", out.display());
    Ok(())
}

fn cell_records(ds: &Dataset, camera: usize, iso_index: usize) -> Vec<&NoisePatchRecord> {
    let iso = ds.manifest.iso_values[iso_index];
    ds.val.iter().filter(|r| r.camera as usize == camera && r.iso == iso).collect()
}

fn cell_batch(ds: &Dataset, recs: &[&NoisePatchRecord], seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(assemble_batch(recs, ds.grid(), &ds.manifest.iso_values, Default::default(), &mut rng)?)
}

/// Values of `channel` from a `[N,3,H,W]` buffer.
fn channel_of(v: &[f32], n: usize, channel: usize) -> Vec<f32> {
    let plane = v.len() / n / 3;
    (0..n).flat_map(|i| v[(i * 3 + channel) * plane..(i * 3 + channel + 1) * plane].iter().copied()).collect()
}

/// One CSV and one SVG per (cell, channel) with the real curve and one curve
/// per model. Returns the number of CSV files written.
fn write_curves(cfg: &RunConfig, ds: &Dataset, models: &[(String, FlowModel)], dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut written = 0;
    for (cam, iso) in ds.grid().cells() {
        let recs = cell_records(ds, cam, iso);
        if recs.is_empty() {
            continue;
        }
        let batch = cell_batch(ds, &recs, cfg.seed)?;
        let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample_rng.set_stream(1);
        let sampled: Vec<Vec<f32>> = models
            .iter()
            .map(|(_, m)| m.sample(&batch.ctx, &mut sample_rng).map(|t| t.data().to_vec()))
            .collect::<Result<_, _>>()?;
        let n = recs.len();
        for ch in 0..3 {
            let clean = channel_of(batch.ctx.clean.data(), n, ch);
            let curve = |noise: &[f32]| variance_vs_intensity(&clean, &channel_of(noise, n, ch), CURVE_BINS, CURVE_MIN_COUNT, (cam, iso), ch);
            let mut curves: Vec<(String, IntensityVarianceCurve)> = vec![("real".into(), curve(batch.noise.data())?)];
            for ((label, _), s) in models.iter().zip(&sampled) {
                curves.push((label.clone(), curve(s)?));
            }
            let stem = format!("c{cam}_i{iso}_ch{ch}");
            let refs: Vec<(&str, &IntensityVarianceCurve)> = curves.iter().map(|(l, c)| (l.as_str(), c)).collect();
            write_curve_csv(&dir.join(format!("{stem}.csv")), &refs)?;
            let series: Vec<Series> = curves
                .iter()
                .map(|(l, c)| Series {
                    name: l.clone(),
                    points: c.reliable().map(|b| (0.5 * (b.lo + b.hi), b.variance)).collect(),
                })
                .collect();
            let title = format!("camera {cam}, iso index {iso}, channel {ch}");
            fs::write(dir.join(format!("{stem}.svg")), svg_line_plot(&series, &title, "clean intensity", "noise variance"))?;
            written += 1;
        }
    }
    Ok(written)
}

fn write_png(path: &Path, planes: &[u8], h: usize, w: usize) -> Result<()> {
    let mut rgb = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            rgb[3 * p + c] = planes[c * h * w + p];
        }
    }
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ColorType::Rgb8).with_context(|| path.display().to_string())?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 256.0).floor().min(255.0) as u8
}

fn std_of(v: &[f32]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Samples noise for the validation patches of the selected cells. Writes
/// the raw noise as little-endian f32, PNGs of clean and sampled noisy
/// patches, and a per-cell std table.
pub fn sample(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let ds = load_dataset(cfg)?;
    if cfg.checkpoints.len() > 1 {
        return Err(Error::Config("`sample` takes a single --checkpoint".into()).into());
    }
    let (label, model) = models(cfg, ds.grid())?.remove(0);
    let grid = ds.grid();
    if cfg.camera.is_some_and(|c| c >= grid.n_cam) || cfg.iso_index.is_some_and(|i| i >= grid.n_iso) {
        return Err(Error::Config(format!(
            "context camera {:?}, iso index {:?} outside the {}x{} grid",
            cfg.camera, cfg.iso_index, grid.n_cam, grid.n_iso
        ))
        .into());
    }
    cfg.echo(out)?;
    let (h, w) = (ds.manifest.patch_height, ds.manifest.patch_width);
    let mut table = fs::File::create(out.join(SAMPLE_STD_FILE))?;
    writeln!(table, "model,camera,iso_index,count,real_std,sampled_std")?;
    let mut files: Vec<PathBuf> = Vec::new();
    for (cam, iso) in grid.cells() {
        if cfg.camera.is_some_and(|c| c != cam) || cfg.iso_index.is_some_and(|i| i != iso) {
            continue;
        }
        let recs = cell_records(&ds, cam, iso);
        if recs.is_empty() {
            if cfg.camera.is_some() && cfg.iso_index.is_some() {
                return Err(Error::Data(format!("no validation patches for camera {cam}, iso index {iso}")).into());
            }
            continue;
        }
        let batch = cell_batch(&ds, &recs, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let noise = model.sample(&batch.ctx, &mut rng)?;
        writeln!(
            table,
            "{label},{cam},{iso},{},{},{}",
            recs.len(),
            std_of(batch.noise.data()),
            std_of(noise.data())
        )?;
        let raw: Vec<u8> = noise.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let noise_path = out.join(format!("noise_c{cam}_i{iso}.f32"));
        fs::write(&noise_path, raw)?;
        files.push(noise_path);
        let per = 3 * h * w;
        let clean = batch.ctx.clean.data();
        for k in 0..recs.len().min(cfg.count) {
            let range = k * per..(k + 1) * per;
            let noisy: Vec<u8> = clean[range.clone()].iter().zip(&noise.data()[range]).map(|(&c, &n)| to_u8(c + n)).collect();
            write_png(&out.join(format!("clean_c{cam}_i{iso}_{k}.png")), &recs[k].clean, h, w)?;
            write_png(&out.join(format!("noisy_c{cam}_i{iso}_{k}.png")), &noisy, h, w)?;
        }
    }
    if files.is_empty() {
        return Err(Error::Data("no validation patches in the selected cells".into()).into());
    }
    println!("sampled {} cells of {label} into {}", files.len(), out.display());
    Ok(())
}
