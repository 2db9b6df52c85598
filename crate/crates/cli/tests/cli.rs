use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srgbflow::data::{Dataset, SynthIspConfig};
use srgbflow::train::BEST_CHECKPOINT;
use srgbflow::zoo;

fn srgbflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srgbflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = srgbflow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing invocation.
fn fails(args: &[&str]) -> (i32, String) {
    let out = srgbflow(args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    (out.status.code().unwrap(), err)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_synth(dir: &Path, cfg: &SynthIspConfig) -> PathBuf {
    let path = dir.join("synth.json");
    std::fs::write(&path, serde_json::to_string(cfg).unwrap()).unwrap();
    path
}

/// A small AWGN dataset on a `n_cam x n_iso` grid.
fn awgn_data(dir: &Path, n_cam: usize, n_iso: usize, sigma: f32, n: usize) -> PathBuf {
    let mut cfg = SynthIspConfig::awgn(n_cam, n_iso, |c, i| sigma * (1.0 + 0.5 * (c * n_iso + i) as f32));
    cfg.patch_size = 8;
    cfg.n_per_cell = n;
    cfg.intensity_range = [0.3, 0.7];
    std::fs::create_dir_all(dir).unwrap();
    let synth = write_synth(dir, &cfg);
    let data = dir.join("data");
    ok(&["synth-data", "--synth-config", s(&synth), "--out", s(&data)]);
    data
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_data_is_deterministic_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth-data", "--cells", "2x2", "--n-per-cell", "10", "--patch-size", "8", "--seed", "3", "--out", s(out)]);
    }
    for f in ["train.nfpd", "val.nfpd", "manifest.json", "synth_config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ds = Dataset::load(&a).unwrap();
    assert_eq!((ds.grid().n_cam, ds.grid().n_iso), (2, 2));
    assert_eq!(ds.train.len() + ds.val.len(), 40);
    let sidecar: SynthIspConfig = serde_json::from_str(&std::fs::read_to_string(a.join("synth_config.json")).unwrap()).unwrap();
    assert_eq!(sidecar.seed, 3);
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echo["cells"], "2x2");
    assert_eq!(echo["command"], "synth-data");
}

#[test]
fn default_synth_grid_is_five_by_five() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth-data", "--patch-size", "4", "--out", s(dir.path())]);
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.manifest.cells.len(), 25);
    assert_eq!(ds.train.len() + ds.val.len(), 25 * 200);
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"cells": "1x3", "n_per_cell": 6, "patch_size": 4, "seed": 9}"#).unwrap();
    let out = dir.path().join("d");
    ok(&["synth-data", "--config", s(&cfg), "--seed", "2", "--out", s(&out)]);
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 2);
    assert_eq!(echo["n_per_cell"], 6);
    // The echoed config reproduces the run.
    let again = dir.path().join("e");
    ok(&["synth-data", "--config", s(&out.join("run_config.json")), "--out", s(&again)]);
    assert_eq!(std::fs::read(out.join("val.nfpd")).unwrap(), std::fs::read(again.join("val.nfpd")).unwrap());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = awgn_data(dir.path(), 1, 2, 0.02, 20);
    let run = dir.path().join("run");
    let (code, err) = fails(&["train", "--model", "nope", "--dataset", s(&data), "--out", s(&run)]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("unknown model"));
    let (code, _) = fails(&["train", "--dataset", s(&dir.path().join("missing")), "--out", s(&run)]);
    assert_eq!(code, 3);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"epoch": 3}"#).unwrap();
    assert_eq!(fails(&["train", "--config", s(&bad)]).0, 2);
    assert_eq!(fails(&["synth-data", "--cells", "3", "--out", s(&run)]).0, 2);
    assert_eq!(fails(&["train", "--dataset", s(&data)]).0, 2);
    let (code, err) = fails(&[
        "train", "--model", "isotropic", "--dataset", s(&data), "--out", s(&run), "--lr", "10000", "--batch", "4",
    ]);
    assert_eq!(code, 4, "{err}");
    assert!(run.join("last.ckpt").exists());
}

#[test]
fn isotropic_training_reaches_the_analytic_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let sigma = 0.05f64;
    let mut cfg = SynthIspConfig::awgn(1, 1, |_, _| sigma as f32);
    cfg.patch_size = 8;
    cfg.n_per_cell = 600;
    cfg.intensity_range = [0.3, 0.7];
    let synth = write_synth(dir.path(), &cfg);
    let data = dir.path().join("data");
    ok(&["synth-data", "--synth-config", s(&synth), "--out", s(&data)]);
    let run = dir.path().join("run");
    let args = ["train", "--model", "isotropic", "--dataset", s(&data), "--out", s(&run), "--epochs", "15", "--batch", "32", "--lr", "0.02"];
    ok(&args);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    // Dequantization dither adds the variance of two uniform errors.
    let var = sigma * sigma + 2.0 / (12.0 * 65536.0);
    let optimum = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln();
    let nll = report["nll_per_dim"].as_f64().unwrap();
    assert!((nll - optimum).abs() < 0.01, "{nll} vs {optimum}");
    assert_eq!(std::fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 16);
}

#[test]
fn proposed_and_noise_flow_train_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = awgn_data(dir.path(), 2, 2, 0.02, 10);
    for model in ["proposed", "noise_flow"] {
        let run = dir.path().join(model);
        ok(&["train", "--model", model, "--dataset", s(&data), "--out", s(&run), "--epochs", "1", "--batch", "8"]);
        assert_eq!(std::fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 2);
        for f in ["model.json", "init.ckpt", "last.ckpt", "best.ckpt", "report.json", "run_config.json"] {
            assert!(run.join(f).exists(), "{model}: {f}");
        }
    }
}

#[test]
fn eval_of_identity_model_matches_the_data_energy() {
    let dir = tempfile::tempdir().unwrap();
    let data = awgn_data(dir.path(), 1, 2, 0.03, 40);
    let out = dir.path().join("eval");
    ok(&["eval", "--model", "diagonal", "--dataset", s(&data), "--out", s(&out)]);
    let ds = Dataset::load(&data).unwrap();
    // Expected squared dequantized noise: squared quantized difference plus
    // the variance of two independent uniform dithers.
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for r in &ds.val {
        for (&a, &b) in r.noisy.iter().zip(&r.clean) {
            sq += ((a as f64 - b as f64) / 256.0).powi(2) + 2.0 / (12.0 * 65536.0);
            n += 1;
        }
    }
    let expected = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * sq / n as f64;
    let rows = csv_rows(&out.join("metrics.csv"));
    let nll: f64 = rows[0][2].parse().unwrap();
    assert!((nll - expected).abs() < 1e-4, "{nll} vs {expected}");
}

#[test]
fn eval_compares_models_and_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let data = awgn_data(dir.path(), 1, 2, 0.02, 60);
    let (fit, untrained) = (dir.path().join("fit"), dir.path().join("untrained"));
    ok(&["train", "--model", "diagonal", "--dataset", s(&data), "--out", s(&fit), "--epochs", "5", "--batch", "16", "--lr", "0.05"]);
    ok(&["train", "--model", "isotropic", "--dataset", s(&data), "--out", s(&untrained), "--max-steps", "0", "--epochs", "1"]);
    let out = dir.path().join("eval");
    ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&untrained), "--checkpoint", s(&fit), "--out", s(&out), "--curves"]);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "diagonal");
    let nll: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(nll[0] <= nll[1]);
    let csvs = std::fs::read_dir(out.join("curves")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "csv").count();
    assert_eq!(csvs, 2 * 3);
    let curve = std::fs::read_to_string(out.join("curves/c0_i1_ch2.csv")).unwrap();
    for source in ["real", "diagonal", "isotropic"] {
        assert!(curve.lines().any(|l| l.starts_with(&format!("{source},"))), "{source}");
    }
    assert!(std::fs::read_to_string(out.join("curves/c0_i1_ch2.svg")).unwrap().starts_with("<svg"));

    let bare = dir.path().join("bare");
    ok(&["curves", "--dataset", s(&data), "--out", s(&bare)]);
    assert_eq!(std::fs::read_dir(&bare).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "csv").count(), 6);

    let other = awgn_data(&dir.path().join("other"), 2, 2, 0.02, 10);
    assert_eq!(fails(&["eval", "--dataset", s(&other), "--checkpoint", s(&fit), "--out", s(&out)]).0, 2);
}

#[test]
fn sampling_is_reproducible_and_consistent_with_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = awgn_data(dir.path(), 1, 2, 0.03, 80);
    let run = dir.path().join("run");
    ok(&["train", "--model", "diagonal", "--dataset", s(&data), "--out", s(&run), "--epochs", "8", "--batch", "16", "--lr", "0.05"]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["sample", "--dataset", s(&data), "--checkpoint", s(&run), "--out", s(out), "--count", "2", "--seed", "4"]);
    }
    for f in ["noisy_c0_i1_1.png", "noise_c0_i0.f32", "sample_std.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let e = dir.path().join("eval");
    ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&run), "--out", s(&e)]);
    let sampled = csv_rows(&a.join("sample_std.csv"));
    let evaluated = csv_rows(&e.join("cell_std_diagonal.csv"));
    assert_eq!(sampled.len(), 2);
    for (x, y) in sampled.iter().zip(&evaluated) {
        let (p, q): (f64, f64) = (x[5].parse().unwrap(), y[5].parse().unwrap());
        assert!((p / q - 1.0).abs() < 0.03, "{p} vs {q}");
    }
    assert_eq!(fails(&["sample", "--dataset", s(&data), "--checkpoint", s(&run), "--out", s(&a), "--iso-index", "2"]).0, 2);
}

#[test]
fn near_zero_noise_model_reproduces_clean_patches() {
    let dir = tempfile::tempdir().unwrap();
    let data = awgn_data(dir.path(), 1, 1, 0.02, 10);
    let ds = Dataset::load(&data).unwrap();
    let mut model = zoo::build_baseline("isotropic", ds.grid(), 0).unwrap();
    let name = model.params().names().find(|n| n.ends_with("log_scale")).unwrap().to_string();
    model.params_mut().get_mut(&name).unwrap().data_mut().fill(20.0);
    let run = dir.path().join("run");
    model.save(&run, BEST_CHECKPOINT).unwrap();
    let out = dir.path().join("out");
    ok(&["sample", "--dataset", s(&data), "--checkpoint", s(&run), "--out", s(&out), "--count", "3"]);
    for k in 0..2 {
        let clean = image::open(out.join(format!("clean_c0_i0_{k}.png"))).unwrap().to_rgb8();
        let noisy = image::open(out.join(format!("noisy_c0_i0_{k}.png"))).unwrap().to_rgb8();
        assert_eq!(clean, noisy);
    }
}

#[test]
fn ingest_cuts_png_pairs_into_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("pngs");
    std::fs::create_dir_all(src.join("clean")).unwrap();
    std::fs::create_dir_all(src.join("noisy")).unwrap();
    let mut meta = String::from("file,camera,iso\n");
    for (k, (cam, iso)) in [(0, 100), (0, 100), (1, 400), (1, 400), (0, 400), (0, 400)].iter().enumerate() {
        let file = format!("im{k}.png");
        let img = image::RgbImage::from_fn(16, 8, |x, y| image::Rgb([(x * 10) as u8, (y * 20) as u8, k as u8]));
        img.save(src.join("clean").join(&file)).unwrap();
        img.save(src.join("noisy").join(&file)).unwrap();
        meta.push_str(&format!("{file},{cam},{iso}\n"));
    }
    std::fs::write(src.join("metadata.csv"), meta).unwrap();
    let out = dir.path().join("ds");
    ok(&["ingest", "--dataset", s(&src), "--out", s(&out), "--patch-size", "8"]);
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.manifest.iso_values, vec![100, 400]);
    assert_eq!(ds.grid().n_cam, 2);
    assert_eq!(ds.train.len() + ds.val.len(), 12);
}
