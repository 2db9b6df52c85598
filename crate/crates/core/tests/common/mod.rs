//! Helpers shared by the integration tests: a catalog of every layer type,
//! random parameterizations, context batches covering the whole grid and a
//! finite-difference Jacobian oracle.
#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srgbflow::flows::softplus_inv;
use srgbflow::{Conditioning, ContextBatch, FlowModel, Grid, LayerDesc, ModelSpec};
use srgbflow_autodiff::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn grid5() -> Grid {
    Grid::new(5, 5)
}

/// Every layer type with every conditioning variant used by the zoo.
pub fn layer_catalog() -> Vec<(String, LayerDesc)> {
    let mut out = vec![
        ("cond_linear".into(), LayerDesc::CondLinear { cond: Conditioning::CAMERA_ISO, tied: false, bias: true }),
        ("cond_linear_tied".into(), LayerDesc::CondLinear { cond: Conditioning::NONE, tied: true, bias: true }),
        ("cond_linear_iso".into(), LayerDesc::CondLinear { cond: Conditioning::ISO_ONLY, tied: false, bias: true }),
        ("gain".into(), LayerDesc::Gain),
        ("conv1x1".into(), LayerDesc::Conv1x1),
        ("cond_conv1x1".into(), LayerDesc::CondConv1x1 { cond: Conditioning::CAMERA_ISO }),
        ("affine_coupling".into(), LayerDesc::AffineCoupling),
        ("spline_coupling".into(), LayerDesc::SplineCoupling),
        ("cond_affine_clean".into(), LayerDesc::CondAffineClean),
        ("inverse_gamma".into(), LayerDesc::InverseGamma { anchored: false, init: 2.2 }),
        ("inverse_gamma_anchored".into(), LayerDesc::InverseGamma { anchored: true, init: 2.2 }),
        (
            "signal_dependent".into(),
            LayerDesc::SignalDependent { cond: Conditioning::CAMERA_ISO, init_beta1: 1e-2, init_beta2: 1e-3 },
        ),
    ];
    let conds = [
        ("all", Conditioning::ALL),
        ("clean_only", Conditioning::CLEAN_ONLY),
        ("camera_only", Conditioning::CAMERA_ONLY),
        ("iso_only", Conditioning::ISO_ONLY),
        ("camera_iso", Conditioning::CAMERA_ISO),
    ];
    for (label, cond) in conds {
        out.push((format!("cond_affine_coupling_{label}"), LayerDesc::CondAffineCoupling { cond }));
        out.push((format!("cond_spline_coupling_{label}"), LayerDesc::CondSplineCoupling { cond }));
    }
    out.push(("cond_affine_full".into(), LayerDesc::CondAffineFull { cond: Conditioning::ALL }));
    out
}

pub fn is_gamma(desc: &LayerDesc) -> bool {
    matches!(desc, LayerDesc::InverseGamma { .. })
}

pub fn single_layer(desc: &LayerDesc, grid: Grid, seed: u64) -> FlowModel {
    let spec = ModelSpec::new("single", grid, vec![desc.clone()]);
    FlowModel::new(spec, seed).unwrap()
}

/// Perturbs every parameter with noise suited to its role, so that
/// conditioner heads, rescalers and tables all leave their identity
/// initialization.
pub fn randomize(model: &mut FlowModel, rng: &mut ChaCha8Rng, std: f32) {
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let t = model.params_mut().get_mut(&name).unwrap();
        let shape = t.shape().to_vec();
        if name.ends_with(".gamma") {
            *t = Tensor::full(&shape, rng.random_range(0.5..2.5));
        } else if name.ends_with(".beta1") || name.ends_with(".beta2") {
            *t = Tensor::uniform(&shape, -3.0, 0.0, rng);
        } else if name.ends_with(".weight") {
            let eye = Tensor::eye(3);
            let mut v = t.data().to_vec();
            for (k, x) in v.iter_mut().enumerate() {
                *x = eye.data()[k % 9] + rng.random_range(-0.4..0.4);
            }
            *t = Tensor::new(&shape, v).unwrap();
        } else {
            // Scale weight noise by fan-in so activations stay of order one.
            let fan_in: usize = if shape.len() >= 2 { shape[1..].iter().product() } else { 1 };
            let noise = Tensor::randn(&shape, std / (fan_in as f32).sqrt(), rng);
            let v: Vec<f32> = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            *t = Tensor::new(&shape, v).unwrap();
        }
    }
}

/// `n` contexts cycling through every cell of the grid, with random clean
/// patches in `clean_range`.
pub fn context_batch(grid: Grid, n: usize, h: usize, w: usize, clean_range: (f32, f32), rng: &mut ChaCha8Rng) -> ContextBatch {
    let cells: Vec<(usize, usize)> = grid.cells().collect();
    let offset = rng.random_range(0..cells.len());
    let cameras = (0..n).map(|i| cells[(i + offset) % cells.len()].0).collect();
    let isos = (0..n).map(|i| cells[(i + offset) % cells.len()].1).collect();
    let clean = Tensor::uniform(&[n, 3, h, w], clean_range.0, clean_range.1, rng);
    ContextBatch::new(grid, clean, cameras, isos).unwrap()
}

/// Input and clean ranges inside the domain of a layer.
pub fn domain(desc: &LayerDesc) -> ((f32, f32), (f32, f32)) {
    if is_gamma(desc) {
        ((0.05, 1.0), (0.2, 1.0))
    } else {
        ((-1.0, 1.0), (0.0, 1.0))
    }
}

/// `log |det J|` of a dense row-major `n x n` matrix by partial-pivoting LU.
pub fn log_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    let mut total = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())
            .unwrap();
        if a[piv * n + col] == 0.0 {
            return f64::NEG_INFINITY;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
        }
        let d = a[col * n + col];
        total += d.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    total
}

/// Outputs of item 0 at `x + t_m e_j` for every input `j` and offset in
/// `offsets`, indexed `[j][m]`.
pub fn probe_outputs(model: &FlowModel, x: &Tensor, ctx: &ContextBatch, offsets: &[f32]) -> Vec<Vec<Vec<f64>>> {
    let d = x.numel();
    let shape = x.shape().to_vec();
    let mut probes = Vec::with_capacity(d * offsets.len());
    for j in 0..d {
        for &t in offsets {
            let mut v = x.data().to_vec();
            v[j] += t;
            probes.push(Tensor::new(&shape[1..], v).unwrap());
        }
    }
    let batch = ContextBatch::repeat(&ctx.get(0).unwrap(), ctx.grid, probes.len()).unwrap();
    let (y, _) = model.encode(&Tensor::stack(&probes).unwrap(), &batch).unwrap();
    (0..d)
        .map(|j| {
            (0..offsets.len())
                .map(|m| {
                    let k = j * offsets.len() + m;
                    y.data()[k * d..(k + 1) * d].iter().map(|&v| v as f64).collect()
                })
                .collect()
        })
        .collect()
}

/// Least-squares polynomial fit of `ys` at abscissae `us`; returns the
/// linear coefficient and the RMS residual.
/// Value of a sequence whose successor changes it least, with that change.
fn best_refinement(r: &[f64]) -> (f64, f64) {
    (1..r.len())
        .map(|k| ((r[k] - r[k - 1]).abs(), r[k - 1]))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .unwrap()
}

pub fn poly_slope(us: &[f64], ys: &[f64], degree: usize) -> (f64, f64) {
    let n = degree + 1;
    let mut a = vec![0.0f64; n * n];
    let mut b = vec![0.0f64; n];
    for (&u, &y) in us.iter().zip(ys) {
        let pw: Vec<f64> = (0..n).map(|k| u.powi(k as i32)).collect();
        for r in 0..n {
            b[r] += pw[r] * y;
            for c in 0..n {
                a[r * n + c] += pw[r] * pw[c];
            }
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap()).unwrap();
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
        }
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r * n + col] / a[col * n + col];
                for k in 0..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let coef: Vec<f64> = (0..n).map(|k| b[k] / a[k * n + k]).collect();
    let rss: f64 = us
        .iter()
        .zip(ys)
        .map(|(&u, &y)| (y - (0..n).map(|k| coef[k] * u.powi(k as i32)).sum::<f64>()).powi(2))
        .sum();
    (coef[1], (rss / us.len() as f64).sqrt())
}

/// Analytic logdet of item 0 and `log |det|` of its finite-difference
/// Jacobian. Each entry is the slope of local polynomial fits over windows
/// of widths `3h, h, h/3, h/9` in three families: both sides, left side only
/// and right side only. A family whose window contains a kink in the second
/// derivative drifts as the window shrinks, so the estimate is taken from the
/// family and adjacent window pair that agree best.
pub fn fd_logdet(model: &FlowModel, x: &Tensor, ctx: &ContextBatch, h: f32) -> (f64, f64) {
    const M: i32 = 8;
    let (_, ld) = model.encode(x, ctx).unwrap();
    let d = x.numel();
    let windows = [3.0 * h, h, h / 3.0, h / 9.0];
    let units: Vec<f64> = (-M..=M).map(|m| m as f64 / M as f64).collect();
    let probes: Vec<_> = windows
        .iter()
        .map(|&w| {
            let offsets: Vec<f32> = units.iter().map(|&u| (u * w as f64) as f32).collect();
            probe_outputs(model, x, ctx, &offsets)
        })
        .collect();
    let mid = M as usize;
    let mut jac = vec![0.0f64; d * d];
    for j in 0..d {
        for i in 0..d {
            let mut families = vec![Vec::new(); 3];
            for (wi, &w) in windows.iter().enumerate() {
                let ys: Vec<f64> = probes[wi][j].iter().map(|y| y[i]).collect();
                families[0].push(poly_slope(&units, &ys, 4).0 / w as f64);
                families[1].push(poly_slope(&units[..=mid], &ys[..=mid], 3).0 / w as f64);
                families[2].push(poly_slope(&units[mid..], &ys[mid..], 3).0 / w as f64);
            }
            jac[i * d + j] = families
                .iter()
                .map(|f| best_refinement(f))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .unwrap()
                .1;
        }
    }
    (ld.data()[0] as f64, log_abs_det(jac, d))
}

pub fn softplus_raw(v: f32) -> f32 {
    softplus_inv(v)
}

