//! Synthetic camera pipeline producing clean/noisy sRGB pairs with known
//! noise statistics.
//!
//! Raw clean intensities `x` get heteroscedastic noise `N(0, beta1 x +
//! beta2)`; clean and noisy raw images then go through white balance, a 3x3
//! color matrix, clipping to `[0,1]`, a smoothstep tone curve, gamma encoding
//! `v^(1/gamma)` and 8-bit quantization.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::Dataset;
use super::split::stratified_split;
use super::NoisePatchRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIsp {
    pub wb_gains: [f32; 3],
    /// Row-major; each row sums to 1.
    pub color_matrix: [[f32; 3]; 3],
    pub gamma: f32,
    /// Blend weight of the smoothstep tone curve, in `[0,1]`.
    pub tone_strength: f32,
}

impl CameraIsp {
    pub fn identity() -> Self {
        Self {
            wb_gains: [1.0; 3],
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: 1.0,
            tone_strength: 0.0,
        }
    }

    /// Float sRGB value of one raw pixel, before quantization.
    pub fn apply(&self, raw: [f32; 3]) -> [f32; 3] {
        let wb = [
            raw[0] * self.wb_gains[0],
            raw[1] * self.wb_gains[1],
            raw[2] * self.wb_gains[2],
        ];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let m = &self.color_matrix[c];
            let v = (m[0] * wb[0] + m[1] * wb[1] + m[2] * wb[2]).clamp(0.0, 1.0);
            let l = self.tone_strength;
            let toned = (1.0 - l) * v + l * v * v * (3.0 - 2.0 * v);
            *o = if self.gamma == 1.0 { toned } else { toned.powf(1.0 / self.gamma) };
        }
        out
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("camera {index}: {m}")));
        if self.wb_gains.iter().any(|&g| !(g > 0.0)) {
            return bad("white-balance gains must be positive".into());
        }
        for (r, row) in self.color_matrix.iter().enumerate() {
            let s: f32 = row.iter().sum();
            if (s - 1.0).abs() > 1e-4 {
                return bad(format!("color matrix row {r} sums to {s}, expected 1"));
            }
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tone_strength) {
            return bad(format!("tone strength must be in [0,1], got {}", self.tone_strength));
        }
        Ok(())
    }
}

/// Raw noise parameters of one (camera, ISO) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellNoise {
    pub camera: usize,
    pub iso: u32,
    pub beta1: f32,
    pub beta2: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthIspConfig {
    pub seed: u64,
    pub n_cam: usize,
    pub iso_values: Vec<u32>,
    pub patch_size: usize,
    pub n_per_cell: usize,
    /// Range of raw clean intensities rendered by the scene generator.
    pub intensity_range: [f32; 2],
    pub train_frac: f64,
    pub cameras: Vec<CameraIsp>,
    /// One entry per (camera, ISO) cell.
    pub noise: Vec<CellNoise>,
}

pub const DEFAULT_ISOS: [u32; 5] = [100, 200, 400, 800, 1600];

fn default_isos(n_iso: usize) -> Vec<u32> {
    (0..n_iso).map(|i| 100u32 << i).collect()
}

impl SynthIspConfig {
    /// Camera ISPs with distinct color rendering, and noise rising with ISO.
    pub fn default_grid(n_cam: usize, n_iso: usize) -> Self {
        let iso_values = default_isos(n_iso);
        let cameras = (0..n_cam)
            .map(|c| {
                let t = c as f32 / n_cam.max(2) as f32;
                let mix = 0.08 + 0.1 * t;
                CameraIsp {
                    wb_gains: [1.6 + 0.4 * t, 1.0, 1.9 - 0.3 * t],
                    color_matrix: [
                        [1.0 + 2.0 * mix, -mix, -mix],
                        [-mix, 1.0 + 2.0 * mix, -mix],
                        [-mix, -mix, 1.0 + 2.0 * mix],
                    ],
                    gamma: 2.2,
                    tone_strength: 0.3 + 0.3 * t,
                }
            })
            .collect();
        let mut noise = Vec::new();
        for c in 0..n_cam {
            let k = 0.7 + 0.15 * c as f32;
            for &iso in &iso_values {
                let s = iso as f32 / 100.0;
                noise.push(CellNoise {
                    camera: c,
                    iso,
                    beta1: 4e-5 * s * k,
                    beta2: 1e-6 * s * s * k,
                });
            }
        }
        Self {
            seed: 0,
            n_cam,
            iso_values,
            patch_size: 32,
            n_per_cell: 200,
            intensity_range: [0.0, 1.0],
            train_frac: 0.8,
            cameras,
            noise,
        }
    }

    /// Identity pipeline with additive Gaussian noise of std `sigma(cam, iso
    /// index)`.
    pub fn awgn(n_cam: usize, n_iso: usize, sigma: impl Fn(usize, usize) -> f32) -> Self {
        let mut cfg = Self::default_grid(n_cam, n_iso);
        cfg.cameras = vec![CameraIsp::identity(); n_cam];
        cfg.noise = cfg
            .noise
            .iter()
            .map(|n| {
                let i = cfg.iso_values.iter().position(|&v| v == n.iso).expect("grid iso");
                let s = sigma(n.camera, i);
                CellNoise {
                    beta1: 0.0,
                    beta2: s * s,
                    ..n.clone()
                }
            })
            .collect();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cam == 0 || self.iso_values.is_empty() {
            return Err(Error::Config("synthetic grid needs at least one camera and ISO".into()));
        }
        if self.patch_size == 0 || self.n_per_cell == 0 {
            return Err(Error::Config("patch size and patches per cell must be positive".into()));
        }
        let [lo, hi] = self.intensity_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("intensity range {lo}..{hi} must lie in [0,1]")));
        }
        if self.cameras.len() != self.n_cam {
            return Err(Error::Config(format!("{} camera ISPs for {} cameras", self.cameras.len(), self.n_cam)));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            c.validate(i)?;
        }
        for c in 0..self.n_cam {
            for &iso in &self.iso_values {
                let n = self.noise.iter().filter(|n| n.camera == c && n.iso == iso).count();
                if n != 1 {
                    return Err(Error::Config(format!(
                        "cell (camera {c}, iso {iso}) has {n} noise entries, expected 1"
                    )));
                }
            }
        }
        if self.noise.len() != self.n_cam * self.iso_values.len() {
            return Err(Error::Config("noise table has entries outside the grid".into()));
        }
        if self.noise.iter().any(|n| !(n.beta1 >= 0.0 && n.beta2 >= 0.0)) {
            return Err(Error::Config("beta1 and beta2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cell_noise(&self, camera: usize, iso: u32) -> Result<&CellNoise> {
        self.noise
            .iter()
            .find(|n| n.camera == camera && n.iso == iso)
            .ok_or_else(|| Error::Config(format!("no noise entry for camera {camera}, iso {iso}")))
    }
}

/// Procedural raw clean patch `[3,S,S]`: a color, a linear gradient and a few
/// low-frequency sinusoids, clamped to the intensity range.
pub fn render_scene<R: Rng + ?Sized>(size: usize, range: [f32; 2], rng: &mut R) -> Vec<f32> {
    let [lo, hi] = range;
    let span = hi - lo;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(lo..hi));
    let (gx, gy): (f32, f32) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let s = size as f32;
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 / s - 0.5, y as f32 / s - 0.5);
            let mut d = 0.3 * span * (gx * u + gy * v);
            for &(fx, fy, ph) in &waves {
                d += 0.1 / 3.0 * span * (2.0 * PI * (fx * u + fy * v) + ph).sin();
            }
            for c in 0..3 {
                out[(c * size + y) * size + x] = (base[c] + d).clamp(lo, hi);
            }
        }
    }
    out
}

pub fn quantize(v: f32) -> u8 {
    (v * 256.0).floor().clamp(0.0, 255.0) as u8
}

fn to_srgb(isp: &CameraIsp, raw: &[f32], size: usize) -> Vec<u8> {
    let n = size * size;
    let mut out = vec![0u8; 3 * n];
    for p in 0..n {
        let v = isp.apply([raw[p], raw[n + p], raw[2 * n + p]]);
        for c in 0..3 {
            out[c * n + p] = quantize(v[c]);
        }
    }
    out
}

/// Random stream of one cell, independent of the other cells.
pub fn cell_rng(seed: u64, camera: usize, iso_index: usize, n_iso: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((camera * n_iso + iso_index) as u64);
    rng
}

/// `n` records of one cell drawn from `rng`.
pub fn generate_cell<R: Rng + ?Sized>(
    cfg: &SynthIspConfig,
    camera: usize,
    iso_index: usize,
    n: usize,
    first_scene: u32,
    rng: &mut R,
) -> Result<Vec<NoisePatchRecord>> {
    let iso = cfg.iso_values[iso_index];
    let noise = cfg.cell_noise(camera, iso)?;
    let isp = &cfg.cameras[camera];
    let s = cfg.patch_size;
    (0..n)
        .map(|i| {
            let clean_raw = render_scene(s, cfg.intensity_range, rng);
            let noisy_raw: Vec<f32> = clean_raw
                .iter()
                .map(|&x| {
                    let z: f32 = rng.sample(StandardNormal);
                    x + (noise.beta1 * x + noise.beta2).sqrt() * z
                })
                .collect();
            NoisePatchRecord::new(
                camera as u32,
                iso,
                first_scene + i as u32,
                s,
                s,
                to_srgb(isp, &clean_raw, s),
                to_srgb(isp, &noisy_raw, s),
            )
        })
        .collect()
}

/// Renders every cell and splits it per cell. Returns the dataset and any
/// split warnings.
pub fn generate(cfg: &SynthIspConfig) -> Result<(Dataset, Vec<String>)> {
    cfg.validate()?;
    let n_iso = cfg.iso_values.len();
    let mut records = Vec::with_capacity(cfg.n_cam * n_iso * cfg.n_per_cell);
    for c in 0..cfg.n_cam {
        for i in 0..n_iso {
            let mut rng = cell_rng(cfg.seed, c, i, n_iso);
            let first = ((c * n_iso + i) * cfg.n_per_cell) as u32;
            records.extend(generate_cell(cfg, c, i, cfg.n_per_cell, first, &mut rng)?);
        }
    }
    let keys: Vec<(u32, u32)> = records.iter().map(|r| (r.camera, r.iso)).collect();
    let split = stratified_split(&keys, cfg.train_frac, cfg.seed)?;
    let ds = Dataset::from_records(records, &split.splits, cfg.n_cam, cfg.iso_values.clone())?;
    Ok((ds, split.warnings))
}
