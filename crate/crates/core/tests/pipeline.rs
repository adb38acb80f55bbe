mod common;

use std::path::Path;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use llc::allocator::{exhaustive_allocation, AllocationProblem};
use llc::data_io::{load_model, load_report, save_model, synth_blobs};
use llc::fixtures::{blob_classifier, rank_deficient_classifier};
use llc::lowrank::DecomposeConfig;
use llc::neighborhood::{RegimeThresholds, Target};
use llc::net::{loss_and_accuracy, Activation, DenseLayer, LayerWeight, TrainConfig};
use llc::pipeline::{decompose, quantize, sweep_bounds, verify, Capacity, QuantizeOptions, BOUNDS_MAGNITUDES};
use llc::quant::QuantLevel;
use llc::{Error, Model, Tensor};

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

fn noisy(model: &Model, sigma: f64, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.clone();
    for layer in m.layers_mut() {
        if let LayerWeight::Dense(w) = &mut layer.weight {
            let n = gaussian(&mut rng, w.shape(), sigma);
            w.data_mut().iter_mut().zip(n.data()).for_each(|(a, b)| *a += b);
        }
    }
    m
}

#[test]
fn quantize_reports_do_not_depend_on_thread_count() {
    let fx = blob_classifier(0).unwrap();
    let opts = QuantizeOptions::default();
    let run = || quantize(&fx.model, &fx.data, None, &opts).unwrap().report.to_json().unwrap();
    let one = with_threads(1, run);
    let four = with_threads(4, run);
    assert_eq!(one, four);
    assert_eq!(one, run());
}

#[test]
fn decompose_reports_do_not_depend_on_thread_count() {
    let fx = rank_deficient_classifier(0).unwrap();
    let cfg = DecomposeConfig::default();
    let run = || decompose(&fx.model, &fx.data, None, &cfg).unwrap().report.to_json().unwrap();
    assert_eq!(with_threads(1, run), with_threads(4, run));
}

#[test]
fn full_budget_beats_every_uniform_plan() {
    let fx = blob_classifier(1).unwrap();
    let original = fx.model.stored_bytes();
    let opts = QuantizeOptions {
        capacity: Capacity::Bytes(original + 1),
        granularity: 1,
        ..Default::default()
    };
    let out = quantize(&fx.model, &fx.data, None, &opts).unwrap();
    let bias: u64 = fx.model.layers().iter().map(|l| l.bias_bytes()).sum();
    let n = fx.model.num_layers();
    for j in 0..opts.levels.len() {
        let bytes: u64 = (0..n).map(|k| out.costs.w[k][j]).sum();
        if bytes + bias <= original {
            let cost: f64 = (0..n).map(|k| out.costs.p[k][j]).sum();
            assert!(out.allocation.total_cost <= cost + 1e-15, "level {}: {} > {cost}", opts.levels[j], out.allocation.total_cost);
        }
    }
    assert!(out.report.compressed_bytes <= original);
}

#[test]
fn two_layer_plan_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = random_net(&mut rng, &[6, 10, 4]);
    let data = random_data(&mut rng, 50, 6, 4);
    let levels = vec![QuantLevel::FullPrecision, QuantLevel::Bits(8), QuantLevel::Bits(4)];
    // Room for one 8-bit and one 4-bit layer but not two 8-bit ones.
    let bias: u64 = model.layers().iter().map(|l| l.bias_bytes()).sum();
    let cap = bias + 60 + 20 + 1;
    let opts = QuantizeOptions {
        levels: levels.clone(),
        capacity: Capacity::Bytes(cap),
        granularity: 1,
        ..Default::default()
    };
    let out = quantize(&model, &data, None, &opts).unwrap();
    assert_eq!(out.costs.w[0], vec![480, 60, 30]);
    assert_eq!(out.costs.w[1], vec![320, 40, 20]);
    let prob = AllocationProblem::new(out.costs.p.clone(), out.costs.w.clone(), cap - bias).unwrap().with_exact_granularity();
    let brute = exhaustive_allocation(&prob).unwrap();
    assert_eq!(out.allocation.choices, brute.choices);
    assert!(out.allocation.total_bytes < cap - bias);
    let names: Vec<_> = out.report.layers.iter().map(|d| d.level.clone().unwrap()).collect();
    let want: Vec<_> = brute.choices.iter().map(|&j| levels[j].to_string()).collect();
    assert_eq!(names, want);
    assert_eq!(out.report.curves.last().unwrap().level, "plan");
    assert_eq!(out.report.curves.len(), levels.len() + 1);
}

#[test]
fn infeasible_budget_is_an_error() {
    let fx = blob_classifier(0).unwrap();
    let opts = QuantizeOptions {
        capacity: Capacity::Bytes(100),
        ..Default::default()
    };
    match quantize(&fx.model, &fx.data, None, &opts) {
        Err(Error::Infeasible { min_bytes, capacity: 100 }) => assert!(min_bytes > 100),
        other => panic!("{:?}", other.map(|o| o.report)),
    }
}

#[test]
fn decompose_shrinks_exact_low_rank_layers_losslessly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (a, b) = (gaussian(&mut rng, &[30, 2], 1.0), gaussian(&mut rng, &[2, 16], 0.5));
    let w = a.matmul(&b).unwrap();
    let layers = vec![
        DenseLayer::new(w, gaussian(&mut rng, &[30], 0.1), Activation::Relu).unwrap(),
        DenseLayer::new(gaussian(&mut rng, &[3, 30], 0.3), Tensor::zeros(&[3]), Activation::Identity).unwrap(),
    ];
    let model = Model::new(layers).unwrap();
    let data = random_data(&mut rng, 40, 16, 3);
    let out = decompose(&model, &data, None, &DecomposeConfig::default()).unwrap();
    assert!(out.report.drop_rate > 0.0);
    assert!((out.report.compressed_loss - out.report.original_loss).abs() <= 1e-9);
    assert_eq!(out.report.layers[0].rank, Some(2));
    assert_eq!(out.traces[0].early_stop, Some(2));
}

#[test]
fn tiny_gamma_leaves_a_full_rank_model_alone() {
    let fx = blob_classifier(0).unwrap();
    let cfg = DecomposeConfig { gamma: 1e-12, ..Default::default() };
    let out = decompose(&fx.model, &fx.data, None, &cfg).unwrap();
    assert_eq!(out.report.drop_rate, 0.0);
    assert_eq!(out.model, fx.model);
    assert!(out.report.curves.is_empty());
}

#[test]
fn bounds_sweep_has_one_row_per_target_and_magnitude() {
    let fx = blob_classifier(0).unwrap();
    let data = fx.data.subset(&(0..200).collect::<Vec<_>>());
    let rows = sweep_bounds(&fx.model, &data, &BOUNDS_MAGNITUDES, 2, 0).unwrap();
    assert_eq!(rows.len(), 2 * BOUNDS_MAGNITUDES.len());
    for (i, r) in rows.iter().enumerate() {
        let target = if i < BOUNDS_MAGNITUDES.len() { Target::Activations } else { Target::Weights };
        assert_eq!(r.target, target);
        assert_eq!(r.magnitude, BOUNDS_MAGNITUDES[i % BOUNDS_MAGNITUDES.len()]);
        assert_eq!(r.regime, RegimeThresholds::for_target(target).classify(r.magnitude));
        assert!(r.gap_first.is_finite() && r.gap_second.is_finite());
    }
    let zero = sweep_bounds(&fx.model, &data, &[0.0], 3, 0).unwrap();
    assert!(zero.iter().all(|r| r.gap_first == 0.0 && r.gap_second == 0.0));
}

#[test]
fn verify_passes_itself_and_fails_noise() {
    let fx = blob_classifier(0).unwrap();
    assert_eq!(verify(&fx.model, &fx.model, &fx.data, 0.0).unwrap().pass, Some(true));
    let bad = noisy(&fx.model, 0.5, 3);
    let r = verify(&fx.model, &bad, &fx.data, 0.0).unwrap();
    assert_eq!(r.pass, Some(false));
    assert!(r.compressed_loss > r.original_loss);
    let wide = verify(&fx.model, &bad, &fx.data, r.compressed_loss - r.original_loss).unwrap();
    assert_eq!(wide.pass, Some(true));
    let other = Model::mlp(&[5, 4, 10], 0).unwrap();
    assert!(verify(&fx.model, &other, &fx.data, 0.0).is_err());
}

#[test]
fn quantized_model_verifies_on_its_calibration_split() {
    for seed in 0..3 {
        let fx = blob_classifier(seed).unwrap();
        let out = quantize(&fx.model, &fx.data, None, &QuantizeOptions::default()).unwrap();
        let r = verify(&fx.model, &out.model, &fx.data, 0.0).unwrap();
        assert_eq!(r.pass, Some(true), "seed {seed}: {} -> {}", r.original_loss, r.compressed_loss);
        assert!(r.drop_rate >= 0.7 - 1e-12);
    }
}

fn llc(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_llc"))
        .current_dir(dir)
        .env("LLC_THREADS", "2")
        .args(args)
        .output()
        .expect("run llc");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = ["--data-format", "synth", "--data", "4,60,8"];
    let with = |extra: &[&'static str]| -> Vec<&str> { synth.iter().copied().chain(extra.iter().copied()).collect() };

    let (code, text) = llc(d, &with(&["train-fixture", "--epochs", "20", "--out-model", "m.llcm"]));
    assert_eq!(code, 0, "{text}");
    let (code, text) = llc(d, &with(&["quantize", "--model", "m.llcm", "--drop-rate", "0.6", "--out-model", "q.llcm", "--out-report", "q.json", "--curves-csv", "q.csv"]));
    assert_eq!(code, 0, "{text}");
    let report = load_report(&d.join("q.json")).unwrap();
    assert!(report.drop_rate >= 0.6 - 1e-12);
    assert!(std::fs::read_to_string(d.join("q.csv")).unwrap().starts_with("level,loss,top1,bytes\n"));

    let (code, text) = llc(d, &with(&["verify", "--model", "m.llcm", "--compressed", "m.llcm"]));
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("PASS"));

    let original = load_model(&d.join("m.llcm")).unwrap();
    save_model(&noisy(&original, 0.5, 1), &d.join("bad.llcm")).unwrap();
    let (code, text) = llc(d, &with(&["verify", "--model", "m.llcm", "--compressed", "bad.llcm", "--split", "all"]));
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("FAIL"));

    let (code, text) = llc(d, &with(&["quantize", "--model", "m.llcm", "--capacity-bytes", "10"]));
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("error"));
    let (code, _) = llc(d, &with(&["quantize", "--drop-rate", "0.5"]));
    assert_eq!(code, 1);
    let (code, _) = llc(d, &with(&["verify", "--model", "missing.llcm", "--compressed", "m.llcm"]));
    assert_eq!(code, 1);
}

#[test]
fn cli_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_blobs(4, 60, 8, 5).unwrap();
    let model = llc::fixtures::train_mlp(&data, &[16, 12], 5, &TrainConfig { epochs: 10, ..Default::default() }).unwrap();
    save_model(&model, &d.join("m.llcm")).unwrap();
    let base = ["--data", "4,60,8", "--seed", "5", "--model", "m.llcm"];
    for (cmd, files) in [
        ("calibrate", vec!["c.json"]),
        ("bounds", vec!["b.json", "b.csv"]),
        ("decompose", vec!["d.json", "d.traces.json", "d.llcm"]),
    ] {
        let stem = &cmd[..1];
        let (report, csv, out) = (format!("{stem}.json"), format!("{stem}.csv"), format!("{stem}.llcm"));
        let mut args: Vec<&str> = base.to_vec();
        args.extend([cmd, "--out-report", &report, "--curves-csv", &csv, "--out-model", &out]);
        let (code, text) = llc(d, &args);
        assert_eq!(code, 0, "{cmd}: {text}");
        for f in files {
            assert!(d.join(f).exists(), "{cmd} did not write {f}");
        }
    }
    let decomposed = load_model(&d.join("d.llcm")).unwrap();
    let (l0, _) = loss_and_accuracy(&model, &data).unwrap();
    assert!(loss_and_accuracy(&decomposed, &data).unwrap().0.is_finite() && l0.is_finite());
}
