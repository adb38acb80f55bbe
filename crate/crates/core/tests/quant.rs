mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use llc::calibration::{calibrate, GradientProfile, LayerProfile};
use llc::fixtures::blob_classifier;
use llc::neighborhood::predict_delta_first_set;
use llc::net::{forward, Activation, DenseLayer, Perturbations};
use llc::quant::{
    apply_plan, build_cost_matrices, choose_direction, compute_scale, directional_round, gradient_opposed_round,
    laplace_optimal_clip, laplace_quantization_mse, make_plans, quantization_noise, round_directed, stochastic_round,
    CostMatrices, Direction, QuantConfig, QuantLevel, ScaleMode, WeightRounding,
};
use llc::{Dataset, Model, Tensor};

fn mean(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.len() as f64
}

/// α*(bits) for a unit Laplace from SciPy quadrature plus Brent refinement,
/// computed outside this crate.
const ACIQ_ORACLE: [(u32, f64); 4] = [
    (2, 2.0),
    (4, 4.8199152265643725),
    (8, 9.882651895871184),
    (16, 20.270114135822894),
];

#[test]
fn absmax_scale_for_unit_range() {
    assert_eq!(compute_scale(&[-1.0, 1.0], 8, ScaleMode::AbsMax).unwrap(), 1.0 / 127.0);
    assert_eq!(compute_scale(&[0.0, 0.5, -2.0], 4, ScaleMode::AbsMax).unwrap(), 2.0 / 7.0);
    assert!(compute_scale(&[1.0], 5, ScaleMode::AbsMax).is_err());
}

#[test]
fn zero_tensor_falls_back_to_full_precision() {
    assert_eq!(compute_scale(&[0.0; 6], 8, ScaleMode::AbsMax).unwrap(), 0.0);
    assert_eq!(compute_scale(&[0.0; 6], 8, ScaleMode::Aciq).unwrap(), 0.0);
    let layer = DenseLayer::new(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3]), Activation::Identity).unwrap();
    let model = Model::new(vec![layer]).unwrap();
    let data = Dataset::new(Tensor::from_fn(&[5, 4], |i| i as f64 * 0.1), vec![0, 1, 2, 0, 1]).unwrap();
    let profile = calibrate(&model, &data).unwrap();
    let cfg = QuantConfig::default();
    let plans = make_plans(&model, &data, &profile, &[QuantLevel::Bits(8)], &cfg).unwrap();
    assert_eq!(plans[0].scale_weight, 0.0);
    let q = apply_plan(&model, &profile, &plans, &cfg).unwrap();
    assert_eq!(q.layers()[0].effective_weight(), model.layers()[0].effective_weight());
}

#[test]
fn aciq_clip_matches_quadrature_oracle() {
    for (bits, want) in ACIQ_ORACLE {
        let got = laplace_optimal_clip(bits);
        assert!((got - want).abs() <= 1e-6 * want, "{bits}: {got} vs {want}");
        let f = |a: f64| laplace_quantization_mse(a, bits);
        assert!(f(got) <= f(got * 1.01) && f(got) <= f(got * 0.99));
    }
}

#[test]
fn aciq_scale_clips_a_laplace_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u = rand_distr::Uniform::new(-0.5f64, 0.5);
    use rand_distr::Distribution;
    let xs: Vec<f64> = (0..20_000)
        .map(|_| {
            let v = u.sample(&mut rng);
            -v.signum() * (1.0 - 2.0 * v.abs()).ln()
        })
        .collect();
    let s = compute_scale(&xs, 4, ScaleMode::Aciq).unwrap();
    // Fitted scale is close to 1, so the clip lands near α*(4).
    assert!((s * 7.0 - ACIQ_ORACLE[1].1).abs() < 0.1, "{}", s * 7.0);
    assert!(s < compute_scale(&xs, 4, ScaleMode::AbsMax).unwrap());
}

#[test]
fn on_grid_tensor_is_a_fixed_point() {
    let s = 0.125;
    let t = Tensor::vector(vec![-3.0 * s, 0.0, 5.0 * s, 7.0 * s]).unwrap();
    for dir in [Direction::Positive, Direction::Negative] {
        let (q, eps) = directional_round(&t, s, 4, dir).unwrap();
        assert_eq!(q, t);
        assert!(eps.data().iter().all(|&e| e == 0.0));
    }
}

#[test]
fn negative_rounding_of_a_fraction_floors_to_zero() {
    let s = 0.3;
    let t = Tensor::vector(vec![0.4 * s]).unwrap();
    let (q, eps) = directional_round(&t, s, 8, Direction::Negative).unwrap();
    assert_eq!(q.data()[0], 0.0);
    assert_eq!(eps.data()[0], -0.4 * s);
}

#[test]
fn positive_rounding_over_many_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = gaussian(&mut rng, &[10_000], 1.0);
    let s = compute_scale(t.data(), 8, ScaleMode::AbsMax).unwrap();
    let (_, eps) = directional_round(&t, s, 8, Direction::Positive).unwrap();
    assert!(mean(&eps) >= 0.0);
    assert!(eps.data().iter().all(|e| e.abs() < s));
}

#[test]
fn clamping_keeps_values_in_range() {
    let limit = 7.0;
    assert_eq!(round_directed(100.0, 1.0, limit, Direction::Positive), 7.0);
    assert_eq!(round_directed(-100.0, 1.0, limit, Direction::Negative), -7.0);
}

#[test]
fn gradient_opposed_errors_never_raise_the_first_order_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let t = gaussian(&mut rng, &[8, 9], 1.0);
        let g = gaussian(&mut rng, &[8, 9], 1.0);
        let s = compute_scale(t.data(), 4, ScaleMode::AbsMax).unwrap();
        let (_, eps) = gradient_opposed_round(&t, &g, s, 4).unwrap();
        for (e, gi) in eps.data().iter().zip(g.data()) {
            assert!(e * gi <= 0.0);
            assert!(e.abs() < s);
        }
    }
    assert!(gradient_opposed_round(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[4]), 1.0, 8).is_err());
}

#[test]
fn stochastic_rounding_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::from_fn(&[20_000], |_| 0.3);
    let (q, eps) = stochastic_round(&t, 1.0, 8, &mut rng).unwrap();
    assert!(q.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(mean(&eps).abs() < 0.01, "{}", mean(&eps));
}

fn profile_with_dot(dot: f64) -> GradientProfile {
    GradientProfile {
        layers: vec![LayerProfile {
            mean_weight_grad: Tensor::zeros(&[1, 1]),
            mean_act_grad: Tensor::vector(vec![dot]).unwrap(),
            grad_dot_one: dot,
        }],
        sample_count: 1,
        mean_loss: 0.0,
    }
}

#[test]
fn direction_opposes_grad_dot_one() {
    assert_eq!(choose_direction(&profile_with_dot(0.3), 0).unwrap(), Direction::Negative);
    assert_eq!(choose_direction(&profile_with_dot(-0.3), 0).unwrap(), Direction::Positive);
    assert_eq!(choose_direction(&profile_with_dot(0.0), 0).unwrap(), Direction::Negative);
    assert!(choose_direction(&profile_with_dot(0.3), 1).is_err());
}

#[test]
fn full_precision_column_is_free_and_storage_is_monotone() {
    let fx = blob_classifier(0).unwrap();
    let profile = calibrate(&fx.model, &fx.data).unwrap();
    let mut levels = QuantLevel::default_levels();
    levels.push(QuantLevel::Bits(2));
    let cm = build_cost_matrices(&fx.model, &fx.data, &profile, &levels, &QuantConfig::default()).unwrap();
    for (i, l) in fx.model.layers().iter().enumerate() {
        let n = (l.out_dim() * l.in_dim()) as u64;
        assert_eq!(cm.p[i][0], 0.0);
        assert_eq!(cm.w[i][0], 8 * n);
        for j in 1..levels.len() {
            assert!(cm.w[i][j] < cm.w[i][j - 1]);
            assert_eq!(cm.w[i][j], (n * levels[j].bit_width().unwrap() as u64).div_ceil(8));
            assert!(cm.p[i][j].is_finite() && cm.p[i][j] >= 0.0);
        }
    }
}

#[test]
fn small_weight_probe_drops_the_weight_term() {
    let fx = blob_classifier(0).unwrap();
    let profile = calibrate(&fx.model, &fx.data).unwrap();
    let levels = [QuantLevel::Bits(8)];
    let lax = QuantConfig { error_max: 1e6, ..Default::default() };
    let strict = QuantConfig { error_max: 1e-300, ..Default::default() };
    let a = build_cost_matrices(&fx.model, &fx.data, &profile, &levels, &lax).unwrap();
    let b = build_cost_matrices(&fx.model, &fx.data, &profile, &levels, &strict).unwrap();
    for i in 0..fx.model.num_layers() {
        let (pa, pb) = (&a.probes[i][0], &b.probes[i][0]);
        assert!(!pa.weight_term && pa.delta_norm == 0.0);
        let act = pa.slope * pa.eps_norm / (pa.eps_size as f64).sqrt();
        assert_eq!(a.p[i][0], act);
        assert!(pb.weight_term);
        assert!(b.p[i][0] > a.p[i][0]);
    }
}

fn oracle_loss(layers: &[(Vec<f64>, Vec<f64>, bool)], dims: &[usize], data: &Dataset, shift: Option<(usize, f64)>) -> f64 {
    let mut total = 0.0;
    for s in 0..data.len() {
        let mut h = data.sample(s).to_vec();
        for (k, (w, b, relu)) in layers.iter().enumerate() {
            if let Some((at, v)) = shift {
                if at == k {
                    h.iter_mut().for_each(|x| *x += v);
                }
            }
            let (o, i) = (dims[k + 1], dims[k]);
            h = (0..o)
                .map(|r| {
                    let z = b[r] + (0..i).map(|c| w[r * i + c] * h[c]).sum::<f64>();
                    if *relu { z.max(0.0) } else { z }
                })
                .collect();
        }
        let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += m + h.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - h[data.labels()[s]];
    }
    total / data.len() as f64
}

/// Rounds toward the side given by `up`, guarding against `x / s` landing a
/// hair off an exact grid point.
fn one_sided(x: f64, s: f64, limit: f64, up: bool) -> f64 {
    let mut k = if up { (x / s).ceil() } else { (x / s).floor() };
    if up && (k - 1.0) * s >= x {
        k -= 1.0;
    }
    if !up && (k + 1.0) * s <= x {
        k += 1.0;
    }
    k.clamp(-limit, limit) * s
}

#[test]
fn two_layer_costs_match_a_hand_trace() {
    let w0 = vec![0.9, -0.4, 0.3, 0.7];
    let b0 = vec![0.1, -0.2];
    let w1 = vec![1.1, -0.6, -0.5, 0.8];
    let b1 = vec![0.05, 0.0];
    let dims = [2, 2, 2];
    let model = Model::new(vec![
        DenseLayer::new(Tensor::new(vec![2, 2], w0.clone()).unwrap(), Tensor::vector(b0.clone()).unwrap(), Activation::Relu).unwrap(),
        DenseLayer::new(Tensor::new(vec![2, 2], w1.clone()).unwrap(), Tensor::vector(b1.clone()).unwrap(), Activation::Identity)
            .unwrap(),
    ])
    .unwrap();
    let data = Dataset::new(Tensor::new(vec![3, 2], vec![0.5, 1.0, -0.3, 0.8, 1.2, -0.7]).unwrap(), vec![0, 1, 0]).unwrap();
    let profile = calibrate(&model, &data).unwrap();
    let levels = [QuantLevel::FullPrecision, QuantLevel::Bits(8), QuantLevel::Bits(4)];
    let cfg = QuantConfig { error_max: 1e-4, ..Default::default() };
    let cm = build_cost_matrices(&model, &data, &profile, &levels, &cfg).unwrap();

    let layers = vec![(w0.clone(), b0.clone(), true), (w1.clone(), b1.clone(), false)];
    let base = oracle_loss(&layers, &dims, &data, None);
    // Layer inputs: raw samples, then the ReLU outputs of layer 0.
    let x = data.inputs().data().to_vec();
    let mut h1 = Vec::new();
    for s in 0..3 {
        for r in 0..2 {
            h1.push((b0[r] + w0[r * 2] * x[s * 2] + w0[r * 2 + 1] * x[s * 2 + 1]).max(0.0));
        }
    }
    let inputs = [x, h1];
    let mut weight_terms = 0;
    for k in 0..2 {
        let w = &layers[k].0;
        let up = profile.layers[k].grad_dot_one < 0.0;
        let sign = if up { 1.0 } else { -1.0 };
        let g = profile.layers[k].mean_weight_grad.data();
        assert_eq!(cm.w[k], vec![32, 4, 2]);
        assert_eq!(cm.p[k][0], 0.0);
        for (j, bits) in [(1usize, 8u32), (2, 4)] {
            let limit = ((1u32 << (bits - 1)) - 1) as f64;
            let s_in = inputs[k].iter().fold(0.0f64, |m, v| m.max(v.abs())) / limit;
            let eps: f64 = inputs[k].iter().map(|&v| (one_sided(v, s_in, limit, up) - v).powi(2)).sum::<f64>().sqrt();
            let slope = (base - oracle_loss(&layers, &dims, &data, Some((k, sign * s_in)))).abs() / s_in;
            let mut want = slope * eps / (inputs[k].len() as f64).sqrt();

            let s_w = w.iter().fold(0.0f64, |m, v| m.max(v.abs())) / limit;
            let mut probed = layers.clone();
            for (v, gi) in probed[k].0.iter_mut().zip(g) {
                *v += if *gi < 0.0 { s_w } else { -s_w };
            }
            let fluc = (base - oracle_loss(&probed, &dims, &data, None)).abs();
            if fluc >= cfg.error_max {
                weight_terms += 1;
                let delta: f64 = w
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| (one_sided(v, s_w, limit, gi < 0.0) - v).powi(2))
                    .sum::<f64>()
                    .sqrt();
                want += fluc / s_w * delta / 2.0;
            }
            let got = cm.p[k][j];
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-12), "layer {k} bits {bits}: {got} vs {want}");
        }
    }
    // The trace must exercise the weight branch, or it checks half of it.
    assert!(weight_terms > 0);
}

#[test]
fn cost_matrices_survive_a_csv_dump() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let fx = blob_classifier(0).unwrap();
    let profile = calibrate(&fx.model, &fx.data).unwrap();
    let cm = build_cost_matrices(&fx.model, &fx.data, &profile, &QuantLevel::default_levels(), &QuantConfig::default()).unwrap();
    let (p, w) = (dir.path().join("P.csv"), dir.path().join("W.csv"));
    cm.write_csv(&p, &w).unwrap();
    let back = CostMatrices::read_csv(&p, &w).unwrap();
    assert_eq!(back.levels, cm.levels);
    assert_eq!(back.w, cm.w);
    assert_eq!(back.p, cm.p);
    let header = std::fs::read_to_string(&p).unwrap();
    assert!(header.starts_with("fp,16,8,4\n"));
}

#[test]
fn quantization_noise_predicts_no_loss_increase() {
    for seed in 0..3 {
        let fx = blob_classifier(seed).unwrap();
        let profile = calibrate(&fx.model, &fx.data).unwrap();
        let n = fx.model.num_layers();
        for bits in [16, 8, 4, 2] {
            let choice = vec![QuantLevel::Bits(bits); n];
            let cfg = QuantConfig::default();
            let plans = make_plans(&fx.model, &fx.data, &profile, &choice, &cfg).unwrap();
            for (k, p) in plans.iter().enumerate() {
                assert_eq!(p.direction, choose_direction(&profile, k).unwrap());
                assert!(p.scale_weight > 0.0 && p.scale_input > 0.0);
            }
            let noise = quantization_noise(&fx.model, &fx.data, &profile, &plans, &cfg).unwrap();
            let pred = predict_delta_first_set(&profile, &noise);
            assert!(pred <= 0.0, "seed {seed} bits {bits}: {pred}");
        }
    }
}

/// Share of layers whose activation-only first-order term `E[∂ℓ/∂h]·ε̄` is
/// at most zero, over several trained fixtures and bit widths.
#[test]
fn activation_term_is_nonpositive_for_most_layers() {
    let (mut ok, mut total) = (0, 0);
    for seed in 0..5 {
        let fx = blob_classifier(seed).unwrap();
        let profile = calibrate(&fx.model, &fx.data).unwrap();
        let n = fx.model.num_layers();
        for bits in [16, 8, 4] {
            let cfg = QuantConfig::default();
            let plans = make_plans(&fx.model, &fx.data, &profile, &vec![QuantLevel::Bits(bits); n], &cfg).unwrap();
            let noise = quantization_noise(&fx.model, &fx.data, &profile, &plans, &cfg).unwrap();
            for k in 0..n {
                let mut only = Perturbations::none(&fx.model);
                only.activations[k] = noise.activations[k].clone();
                total += 1;
                if predict_delta_first_set(&profile, &only) <= 0.0 {
                    ok += 1;
                }
            }
        }
    }
    assert!(ok as f64 >= 0.9 * total as f64, "{ok} of {total} layers");
}

#[test]
fn layer_direction_mode_rounds_every_weight_one_way() {
    let fx = blob_classifier(0).unwrap();
    let profile = calibrate(&fx.model, &fx.data).unwrap();
    let cfg = QuantConfig { weight_rounding: WeightRounding::LayerDirection, ..Default::default() };
    let choice = vec![QuantLevel::Bits(8); fx.model.num_layers()];
    let plans = make_plans(&fx.model, &fx.data, &profile, &choice, &cfg).unwrap();
    let noise = quantization_noise(&fx.model, &fx.data, &profile, &plans, &cfg).unwrap();
    for (k, p) in plans.iter().enumerate() {
        let d = noise.weights[k].as_ref().unwrap();
        assert!(d.data().iter().all(|e| e * p.direction.sign() >= 0.0));
    }
}

#[test]
fn quantized_inputs_sit_on_the_grid() {
    let fx = blob_classifier(0).unwrap();
    let profile = calibrate(&fx.model, &fx.data).unwrap();
    let cfg = QuantConfig::default();
    let choice = vec![QuantLevel::Bits(4); fx.model.num_layers()];
    let plans = make_plans(&fx.model, &fx.data, &profile, &choice, &cfg).unwrap();
    let q = apply_plan(&fx.model, &profile, &plans, &cfg).unwrap();
    for (l, p) in q.layers().iter().zip(&plans) {
        assert_eq!(l.weight_bits, Some(4));
        for v in l.effective_weight().data() {
            let k = v / p.scale_weight;
            assert!((k - k.round()).abs() < 1e-9 && k.abs() <= 7.0 + 1e-9);
        }
    }
    let out = forward(&q, fx.data.inputs()).unwrap();
    assert!(out.logits.data().iter().all(|v| v.is_finite()));
}

proptest! {
    #[test]
    fn rounding_lands_on_grid_with_forced_sign(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..64),
        bits in prop_oneof![Just(2u32), Just(4), Just(8), Just(16)],
        up in any::<bool>(),
    ) {
        let t = Tensor::vector(xs).unwrap();
        let s = compute_scale(t.data(), bits, ScaleMode::AbsMax).unwrap();
        prop_assume!(s > 0.0);
        let dir = if up { Direction::Positive } else { Direction::Negative };
        let limit = ((1u32 << (bits - 1)) - 1) as f64;
        let (q, eps) = directional_round(&t, s, bits, dir).unwrap();
        for ((&qv, &e), &x) in q.data().iter().zip(eps.data()).zip(t.data()) {
            let k = qv / s;
            prop_assert!((k - k.round()).abs() < 1e-9 && k.abs() <= limit + 1e-9);
            prop_assert!(e.abs() < s);
            prop_assert_eq!(e, qv - x);
            if up { prop_assert!(e >= 0.0) } else { prop_assert!(e <= 0.0) }
        }
    }

    #[test]
    fn aciq_never_exceeds_absmax(xs in proptest::collection::vec(-5.0f64..5.0, 2..200), bits in prop_oneof![Just(2u32), Just(4), Just(8)]) {
        let a = compute_scale(&xs, bits, ScaleMode::Aciq).unwrap();
        let m = compute_scale(&xs, bits, ScaleMode::AbsMax).unwrap();
        prop_assert!(a <= m);
    }
}
