mod common;

use common::*;
use srgbflow::flows::{GAMMA_EPS, LOG_SCALE_BOUND};
use srgbflow::{Conditioning, ContextBatch, FlowModel, Grid, LayerDesc, ModelSpec};
use srgbflow_autodiff::Tensor;

fn set(model: &mut FlowModel, suffix: &str, f: impl Fn(usize) -> f32) {
    let name = model.params().names().find(|n| n.ends_with(suffix)).unwrap().to_string();
    let t = model.params_mut().get_mut(&name).unwrap();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn every_layer_round_trips_on_all_contexts() {
    let grid = grid5();
    let mut r = rng(1);
    for (label, desc) in layer_catalog() {
        let mut worst = 0.0f32;
        for trial in 0..4 {
            let mut model = single_layer(&desc, grid, trial);
            randomize(&mut model, &mut r, 0.3);
            let (xr, cr) = domain(&desc);
            let ctx = context_batch(grid, 50, 8, 8, cr, &mut r);
            let x = Tensor::uniform(&[50, 3, 8, 8], xr.0, xr.1, &mut r);
            let (z, _) = model.encode(&x, &ctx).unwrap();
            assert!(z.all_finite(), "{label}");
            worst = worst.max(model.decode(&z, &ctx).unwrap().max_abs_diff(&x).unwrap());
        }
        assert!(worst < 1e-5, "{label}: round-trip error {worst}");
    }
}

#[test]
fn every_layer_logdet_matches_finite_differences() {
    let grid = grid5();
    let mut r = rng(2);
    for (label, desc) in layer_catalog() {
        for trial in 0..5 {
            let mut model = single_layer(&desc, grid, trial);
            randomize(&mut model, &mut r, 0.3);
            let (xr, cr) = domain(&desc);
            let ctx = context_batch(grid, 1, 2, 2, cr, &mut r);
            let x = Tensor::uniform(&[1, 3, 2, 2], xr.0, xr.1, &mut r);
            let (analytic, fd) = fd_logdet(&model, &x, &ctx, 1e-2);
            assert!((analytic - fd).abs() < 1e-3, "{label}: analytic {analytic} vs fd {fd}");
        }
    }
}

#[test]
fn composed_logdet_is_sum_of_layer_logdets() {
    let grid = grid5();
    let mut r = rng(3);
    let layers: Vec<LayerDesc> = layer_catalog()
        .into_iter()
        .filter(|(_, d)| !is_gamma(d))
        .map(|(_, d)| d)
        .collect();
    let mut model = FlowModel::new(ModelSpec::new("stack", grid, layers), 0).unwrap();
    randomize(&mut model, &mut r, 0.1);
    let ctx = context_batch(grid, 25, 4, 4, (0.0, 1.0), &mut r);
    let x = Tensor::uniform(&[25, 3, 4, 4], -0.5, 0.5, &mut r);
    let trace = model.trace(&x, &ctx).unwrap();
    let (z, total) = model.encode(&x, &ctx).unwrap();
    let mut sum = vec![0.0f32; 25];
    for t in &trace {
        for (s, v) in sum.iter_mut().zip(t.logdet.data()) {
            *s += v;
        }
    }
    assert_eq!(sum, total.data());
    assert_eq!(trace.last().unwrap().output, z);
}

#[test]
fn zeroed_conditioning_makes_layers_context_free() {
    let grid = grid5();
    let mut r = rng(4);
    for (label, desc) in layer_catalog() {
        let mut model = single_layer(&desc, grid, 0);
        randomize(&mut model, &mut r, 0.3);
        model.zero_conditioning().unwrap();
        let (xr, cr) = domain(&desc);
        let x1 = Tensor::uniform(&[1, 3, 8, 8], xr.0, xr.1, &mut r);
        let x = Tensor::stack(&[x1.batch_item(0).unwrap(), x1.batch_item(0).unwrap()]).unwrap();
        let clean = Tensor::uniform(&[2, 3, 8, 8], cr.0, cr.1, &mut r);
        let ctx = ContextBatch::new(grid, clean, vec![0, 4], vec![1, 3]).unwrap();
        if matches!(desc, LayerDesc::InverseGamma { anchored: true, .. }) {
            // The anchored variant shifts by the clean patch by construction.
            continue;
        }
        let (z, ld) = model.encode(&x, &ctx).unwrap();
        let per = z.numel() / 2;
        assert_eq!(z.data()[..per], z.data()[per..], "{label}");
        assert_eq!(ld.data()[0], ld.data()[1], "{label}");
    }
}

/// Context pairs that differ only in inputs the conditioning hides.
fn masked_pairs(cond: Conditioning, grid: Grid, r: &mut rand_chacha::ChaCha8Rng) -> ContextBatch {
    let c1 = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, r);
    let c2 = if cond.clean { c1.clone() } else { Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, r) };
    let cams = if cond.camera { vec![2, 2] } else { vec![0, 4] };
    let isos = if cond.iso { vec![3, 3] } else { vec![1, 4] };
    let clean = Tensor::stack(&[c1.batch_item(0).unwrap(), c2.batch_item(0).unwrap()]).unwrap();
    ContextBatch::new(grid, clean, cams, isos).unwrap()
}

#[test]
fn masked_variants_ignore_hidden_inputs() {
    let grid = grid5();
    let mut r = rng(5);
    for cond in [Conditioning::CLEAN_ONLY, Conditioning::CAMERA_ONLY, Conditioning::ISO_ONLY, Conditioning::CAMERA_ISO] {
        for desc in [
            LayerDesc::CondAffineCoupling { cond },
            LayerDesc::CondSplineCoupling { cond },
            LayerDesc::CondLinear { cond, tied: false, bias: true },
        ] {
            let mut model = single_layer(&desc, grid, 0);
            randomize(&mut model, &mut r, 0.3);
            let ctx = masked_pairs(cond, grid, &mut r);
            let x1 = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
            let x = Tensor::stack(&[x1.batch_item(0).unwrap(), x1.batch_item(0).unwrap()]).unwrap();
            let (z, ld) = model.encode(&x, &ctx).unwrap();
            let per = z.numel() / 2;
            assert_eq!(z.data()[..per], z.data()[per..], "{desc:?}");
            assert_eq!(ld.data()[0], ld.data()[1], "{desc:?}");
        }
    }
}

#[test]
fn camera_swap_changes_conditional_coupling() {
    let grid = grid5();
    let mut r = rng(6);
    let mut model = single_layer(&LayerDesc::CondAffineCoupling { cond: Conditioning::ALL }, grid, 0);
    randomize(&mut model, &mut r, 0.3);
    let c = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r).batch_item(0).unwrap();
    let clean = Tensor::stack(&[c.clone(), c]).unwrap();
    let ctx = ContextBatch::new(grid, clean, vec![0, 3], vec![2, 2]).unwrap();
    let x1 = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r).batch_item(0).unwrap();
    let x = Tensor::stack(&[x1.clone(), x1]).unwrap();
    let (z, _) = model.encode(&x, &ctx).unwrap();
    let per = z.numel() / 2;
    assert_ne!(z.data()[..per], z.data()[per..]);
}

#[test]
fn fresh_couplings_are_identity() {
    let grid = grid5();
    let mut r = rng(7);
    for (label, desc) in layer_catalog() {
        if matches!(desc, LayerDesc::Conv1x1 | LayerDesc::InverseGamma { .. } | LayerDesc::SignalDependent { .. }) {
            continue;
        }
        let model = single_layer(&desc, grid, 0);
        let ctx = context_batch(grid, 25, 8, 8, (0.0, 1.0), &mut r);
        let x = Tensor::uniform(&[25, 3, 8, 8], -1.0, 1.0, &mut r);
        let (z, ld) = model.encode(&x, &ctx).unwrap();
        assert!(z.max_abs_diff(&x).unwrap() < 1e-6, "{label}");
        assert!(ld.data().iter().all(|&v| v.abs() < 1e-5), "{label}");
    }
}

#[test]
fn conv1x1_scaled_identity_logdet() {
    let grid = Grid::new(1, 1);
    let mut model = single_layer(&LayerDesc::Conv1x1, grid, 0);
    set(&mut model, ".weight", |i| if i % 4 == 0 { 2.0 } else { 0.0 });
    let ctx = ContextBatch::new(grid, Tensor::zeros(&[1, 3, 2, 2]), vec![0], vec![0]).unwrap();
    let x = Tensor::uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng(8));
    let (z, ld) = model.encode(&x, &ctx).unwrap();
    assert!((ld.data()[0] - 4.0 * 8f32.ln()).abs() < 1e-5);
    assert!((ld.data()[0] - 8.3178).abs() < 1e-4);
    assert!(z.max_abs_diff(&x.map(|v| 2.0 * v)).unwrap() < 1e-6);
}

#[test]
fn conv1x1_logdet_matches_direct_determinant() {
    let grid = Grid::new(1, 1);
    let mut r = rng(9);
    for seed in 0..10 {
        let mut model = single_layer(&LayerDesc::Conv1x1, grid, seed);
        randomize(&mut model, &mut r, 0.0);
        let w: Vec<f64> = model.params().iter().next().unwrap().1.data().iter().map(|&v| v as f64).collect();
        let det = w[0] * (w[4] * w[8] - w[5] * w[7]) - w[1] * (w[3] * w[8] - w[5] * w[6]) + w[2] * (w[3] * w[7] - w[4] * w[6]);
        let ctx = ContextBatch::new(grid, Tensor::zeros(&[1, 3, 4, 5]), vec![0], vec![0]).unwrap();
        let (_, ld) = model.encode(&Tensor::zeros(&[1, 3, 4, 5]), &ctx).unwrap();
        assert!((ld.data()[0] as f64 - 20.0 * det.abs().ln()).abs() < 1e-4);
    }
}

#[test]
fn singular_conv1x1_is_rejected() {
    let grid = Grid::new(1, 1);
    let mut model = single_layer(&LayerDesc::Conv1x1, grid, 0);
    set(&mut model, ".weight", |i| if i < 3 { 1.0 } else { 0.5 });
    let ctx = ContextBatch::new(grid, Tensor::zeros(&[1, 3, 2, 2]), vec![0], vec![0]).unwrap();
    let x = Tensor::zeros(&[1, 3, 2, 2]);
    assert!(model.encode(&x, &ctx).is_err());
    assert!(model.decode(&x, &ctx).is_err());
}

#[test]
fn cond_linear_analytic_example() {
    let grid = Grid::new(2, 2);
    let mut model = single_layer(&LayerDesc::CondLinear { cond: Conditioning::CAMERA_ISO, tied: false, bias: true }, grid, 0);
    set(&mut model, ".log_scale", |_| 2f32.ln());
    set(&mut model, ".bias", |_| 0.1);
    let ctx = ContextBatch::new(grid, Tensor::zeros(&[1, 3, 3, 2]), vec![1], vec![0]).unwrap();
    let (z, ld) = model.encode(&Tensor::full(&[1, 3, 3, 2], 0.5), &ctx).unwrap();
    assert!(z.data().iter().all(|&v| (v - 1.1).abs() < 1e-6));
    assert!((ld.data()[0] - 3.0 * 6.0 * 2f32.ln()).abs() < 1e-5);
}

#[test]
fn cond_linear_rejects_context_outside_grid() {
    let grid = Grid::new(2, 2);
    assert!(ContextBatch::new(grid, Tensor::zeros(&[1, 3, 2, 2]), vec![2], vec![0]).is_err());
    let model = single_layer(&LayerDesc::CondLinear { cond: Conditioning::CAMERA_ISO, tied: false, bias: true }, grid, 0);
    let other = ContextBatch::new(Grid::new(3, 3), Tensor::zeros(&[1, 3, 2, 2]), vec![2], vec![0]).unwrap();
    assert!(model.encode(&Tensor::zeros(&[1, 3, 2, 2]), &other).is_err());
}

#[test]
fn coupling_with_unit_rescale_only_shifts_when_scale_head_is_off() {
    // A zero rescale output makes the scale exactly one while the shift acts.
    let grid = grid5();
    let mut r = rng(10);
    let mut model = single_layer(&LayerDesc::CondAffineCoupling { cond: Conditioning::ALL }, grid, 0);
    randomize(&mut model, &mut r, 0.3);
    let fr_w = model.params().names().find(|n| n.contains(".fr.") && n.ends_with("w3")).unwrap().to_string();
    let fr_b = model.params().names().find(|n| n.contains(".fr.") && n.ends_with("b3")).unwrap().to_string();
    model.params_mut().get_mut(&fr_w).unwrap().data_mut().fill(0.0);
    model.params_mut().get_mut(&fr_b).unwrap().data_mut().fill(-1.0);
    let ctx = context_batch(grid, 5, 8, 8, (0.0, 1.0), &mut r);
    let x = Tensor::uniform(&[5, 3, 8, 8], -1.0, 1.0, &mut r);
    let (z, ld) = model.encode(&x, &ctx).unwrap();
    assert!(ld.data().iter().all(|&v| v == 0.0));
    assert_eq!(z.data()[..64], x.data()[..64]);
    assert_ne!(z.data()[64..128], x.data()[64..128]);
}

#[test]
fn cond_affine_full_doubling_example() {
    let grid = Grid::new(1, 1);
    let mut model = single_layer(&LayerDesc::CondAffineFull { cond: Conditioning::ALL }, grid, 0);
    let bias_name = model
        .params()
        .names()
        .filter(|n| n.contains(".st.") && n.ends_with(".b"))
        .last()
        .unwrap()
        .to_string();
    let b = model.params_mut().get_mut(&bias_name).unwrap();
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        // Raw log-scale whose soft clamp is exactly ln 2.
        *v = if i < 3 { LOG_SCALE_BOUND * (2f32.ln() / LOG_SCALE_BOUND).atanh() } else { 0.0 };
    }
    let ctx = ContextBatch::new(grid, Tensor::uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng(11)), vec![0], vec![0]).unwrap();
    let x = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng(12));
    let (z, ld) = model.encode(&x, &ctx).unwrap();
    assert!(z.max_abs_diff(&x.map(|v| 2.0 * v)).unwrap() < 1e-5);
    assert!((ld.data()[0] - 48.0 * 2f32.ln()).abs() < 1e-4);
}

#[test]
fn cond_affine_clean_is_spatially_constant_on_constant_clean() {
    let grid = Grid::new(1, 1);
    let mut spec = ModelSpec::new("ca", grid, vec![LayerDesc::CondAffineClean]);
    spec.net.kernel = 1;
    let mut model = FlowModel::new(spec, 0).unwrap();
    randomize(&mut model, &mut rng(13), 0.3);
    let ctx = ContextBatch::new(grid, Tensor::full(&[1, 3, 4, 4], 0.4), vec![0], vec![0]).unwrap();
    let (z, _) = model.encode(&Tensor::zeros(&[1, 3, 4, 4]), &ctx).unwrap();
    for c in 0..3 {
        let plane = &z.data()[c * 16..(c + 1) * 16];
        assert!(plane.iter().all(|&v| v == plane[0]));
    }
}

#[test]
fn spline_is_monotone_at_probe_points() {
    let grid = grid5();
    let mut r = rng(14);
    for trial in 0..10 {
        let mut model = single_layer(&LayerDesc::CondSplineCoupling { cond: Conditioning::ALL }, grid, trial);
        randomize(&mut model, &mut r, 0.5);
        let ctx = context_batch(grid, 1, 10, 10, (0.0, 1.0), &mut r);
        let item = ctx.get(0).unwrap();
        // Probe the transformed channels along a ramp with a fixed channel 0.
        let mut prev: Option<Tensor> = None;
        for k in 0..=100 {
            let v = -3.5 + 7.0 * k as f32 / 100.0;
            let mut x = Tensor::uniform(&[1, 3, 10, 10], -1.0, 1.0, &mut rng(99));
            for j in 100..300 {
                x.data_mut()[j] = v;
            }
            let batch = ContextBatch::repeat(&item, grid, 1).unwrap();
            let (z, _) = model.encode(&x, &batch).unwrap();
            if let Some(p) = &prev {
                for j in 100..300 {
                    assert!(z.data()[j] > p.data()[j], "trial {trial} probe {k}");
                }
            }
            prev = Some(z);
        }
    }
}

#[test]
fn gamma_examples() {
    let grid = Grid::new(1, 1);
    let ctx = ContextBatch::new(grid, Tensor::full(&[1, 3, 2, 2], 0.3), vec![0], vec![0]).unwrap();
    let mut model = single_layer(&LayerDesc::InverseGamma { anchored: false, init: 2.2 }, grid, 0);
    let (z, _) = model.encode(&Tensor::full(&[1, 3, 2, 2], 0.5), &ctx).unwrap();
    assert!(z.data().iter().all(|&v| (v - 0.21764).abs() < 1e-5));
    set(&mut model, ".gamma", |_| 1.0);
    let x = Tensor::uniform(&[1, 3, 2, 2], 0.01, 1.0, &mut rng(15));
    let (z, ld) = model.encode(&x, &ctx).unwrap();
    assert_eq!(z, x);
    assert_eq!(ld.data()[0], 0.0);
    set(&mut model, ".gamma", |_| 0.0);
    assert!(model.encode(&x, &ctx).is_err());
    set(&mut model, ".gamma", |_| 2.0);
    let (z, _) = model.encode(&Tensor::zeros(&[1, 3, 2, 2]), &ctx).unwrap();
    assert!(z.data().iter().all(|&v| (v - GAMMA_EPS * GAMMA_EPS).abs() < 1e-15));
}

fn sd_model(grid: Grid, beta1: f32, beta2: f32) -> FlowModel {
    let desc = LayerDesc::SignalDependent { cond: Conditioning::CAMERA_ISO, init_beta1: 1e-2, init_beta2: 1.0 };
    let mut m = single_layer(&desc, grid, 0);
    let raw1 = if beta1 == 0.0 { srgbflow::flows::SOFTPLUS_ZERO } else { softplus_raw(beta1) };
    set(&mut m, ".beta1", |_| raw1);
    set(&mut m, ".beta2", |_| softplus_raw(beta2));
    m
}

#[test]
fn signal_dependent_unit_scaling() {
    let grid = Grid::new(1, 1);
    let model = sd_model(grid, 0.0, 1.0);
    let ctx = ContextBatch::new(grid, Tensor::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut rng(16)), vec![0, 0], vec![0, 0]).unwrap();
    let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng(17));
    let (z, ld) = model.encode(&x, &ctx).unwrap();
    assert!(z.max_abs_diff(&x).unwrap() < 1e-6);
    assert!(ld.data().iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn signal_dependent_awgn_sample_std() {
    let grid = Grid::new(1, 1);
    let sigma = 0.05f32;
    let model = sd_model(grid, 0.0, sigma * sigma);
    let ctx = ContextBatch::new(grid, Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(18)), vec![0], vec![0]).unwrap();
    let batch = ContextBatch::repeat(&ctx.get(0).unwrap(), grid, 521).unwrap();
    let s = model.sample(&batch, &mut rng(19)).unwrap();
    let n = s.numel() as f64;
    assert!(n >= 1e5);
    let mean = s.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (s.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std / sigma as f64 - 1.0).abs() < 0.03, "{std}");
}

#[test]
fn signal_dependent_variance_follows_intensity() {
    let grid = Grid::new(1, 1);
    let (b1, b2) = (0.02f32, 1e-3f32);
    let model = sd_model(grid, b1, b2);
    for level in [0.1f32, 0.5, 0.9] {
        let ctx = ContextBatch::new(grid, Tensor::full(&[1, 3, 8, 8], level), vec![0], vec![0]).unwrap();
        let batch = ContextBatch::repeat(&ctx.get(0).unwrap(), grid, 600).unwrap();
        let s = model.sample(&batch, &mut rng(20)).unwrap();
        let n = s.numel() as f64;
        let var = s.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        let truth = (b1 * level + b2) as f64;
        assert!((var / truth - 1.0).abs() < 0.05, "level {level}: {var} vs {truth}");
    }
}
