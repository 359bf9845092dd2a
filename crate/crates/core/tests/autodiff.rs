mod common;

use common::gradcheck::{self, Case};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use wlss_core::autodiff::{Adam, AdamConfig, Mode, Padding, ParamSet, RunningStats, Tape, Tensor};
use wlss_core::sed::{SedArch, SedModel};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_op_matches_central_differences() {
    for r in gradcheck::run_suite(1) {
        assert!(r.instances >= 20);
        assert!(r.worst <= gradcheck::TOLERANCE, "{}: worst relative error {:.3e}", r.op, r.worst);
    }
}

#[test]
fn conv_and_transposed_conv_are_adjoint() {
    let worst = gradcheck::adjoint_worst(2, 50);
    assert!(worst <= 1e-6, "adjoint violation {worst:.3e}");
}

#[test]
fn conv_4x4_with_3x3_kernel_gradients() {
    let case = Case {
        inputs: vec![random(&[1, 1, 4, 4], 3), random(&[1, 1, 3, 3], 4), random(&[1], 5)],
        build: Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Same)),
    };
    let worst = gradcheck::check(&case, 6);
    assert!(worst <= 1e-4, "{worst:.3e}");
}

#[test]
fn batch_norm_2x2x2x2_gradients() {
    let case = Case {
        inputs: vec![random(&[2, 2, 2, 2], 7), random(&[2], 8), random(&[2], 9)],
        build: Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], &mut RunningStats::new(2), Mode::Train)),
    };
    assert!(gradcheck::check(&case, 10) <= 1e-3);
}

#[test]
fn linear_gradients_within_1e5() {
    for seed in 0..5 {
        let case = Case {
            inputs: vec![random(&[3, 4], seed), random(&[2, 4], seed + 10), random(&[2], seed + 20)],
            build: Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        };
        let worst = gradcheck::check(&case, seed);
        assert!(worst <= 1e-5, "{worst:.3e}");
    }
}

#[test]
fn bce_gradient_has_closed_form() {
    let pred = Tensor::new(vec![1, 4], vec![0.2, 0.7, 0.5, 0.9]).unwrap();
    let target = Tensor::new(vec![1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let mut t = Tape::new();
    let p = t.leaf(pred.clone(), true);
    let loss = t.bce_loss(p, &target).unwrap();
    t.backward(loss).unwrap();
    for ((g, q), y) in t.grad(p).unwrap().iter().zip(pred.data()).zip(target.data()) {
        let expect = (q - y) / (q * (1.0 - q));
        assert!((g - expect).abs() <= 1e-4 * expect.abs());
    }
    let case = Case {
        inputs: vec![pred],
        build: Box::new(move |t, v| t.bce_loss(v[0], &target)),
    };
    assert!(gradcheck::check(&case, 1) <= 1e-4);
}

#[test]
fn bce_closed_form_values() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let l = t.bce_loss(p, &Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
    assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    let y = Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
    let p = t.constant(y.clone());
    let l = t.bce_loss(p, &y).unwrap();
    assert!(t.value(l).data()[0] <= 3.0 * (1.0 / (1.0 - 1e-7f64)).ln() + 1e-15);
    let bad = Tensor::new(vec![1, 3], vec![1.0, 0.5, 0.0]).unwrap();
    assert!(t.bce_loss(p, &bad).is_err());
}

#[test]
fn mae_gradient_is_plus_minus_one_over_n() {
    let est = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let tgt = Tensor::new(vec![2, 2], vec![0.5, 0.5, 2.5, 2.5]).unwrap();
    let mut t = Tape::new();
    let (e, g) = (t.leaf(est, true), t.constant(tgt));
    let l = t.mae_loss(e, g).unwrap();
    assert!((t.value(l).data()[0] - 0.5).abs() < 1e-15);
    t.backward(l).unwrap();
    assert_eq!(t.grad(e).unwrap(), &[-0.25, 0.25, -0.25, 0.25]);

    let mut t = Tape::new();
    let x = t.constant(random(&[3, 3], 1));
    let ones = t.constant(Tensor::full(&[3, 3], 1.0));
    let shifted = t.add(x, ones).unwrap();
    let l = t.mae_loss(shifted, x).unwrap();
    assert!((t.value(l).data()[0] - 1.0).abs() < 1e-12);
    let l0 = t.mae_loss(x, x).unwrap();
    assert_eq!(t.value(l0).data()[0], 0.0);
}

#[test]
fn max_over_time_routes_to_argmax() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3, 1], vec![0.1, 0.9, 0.2]).unwrap(), true);
    let m = t.max_over_time(x).unwrap();
    assert_eq!(t.value(m).data(), &[0.9]);
    let l = t.sum(m);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[4, 1], 0.3), true);
    let m = t.max_over_time(x).unwrap();
    assert_eq!(t.value(m).data(), &[0.3]);
    let l = t.sum(m);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

    let empty = t.constant(Tensor::zeros(&[0, 2]));
    assert!(t.max_over_time(empty).is_err());
}

proptest! {
    #[test]
    fn max_over_time_is_column_max(values in prop::collection::vec(-5.0f64..5.0, 64)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![16, 4], values.clone()).unwrap());
        let m = t.max_over_time(x).unwrap();
        for k in 0..4 {
            let brute = (0..16).map(|s| values[s * 4 + k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(t.value(m).data()[k], brute);
        }
    }

    #[test]
    fn forward_and_backward_stay_finite(values in prop::collection::vec(-50.0f64..50.0, 2 * 2 * 3 * 3)) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 2, 3, 3], values).unwrap(), true);
        let k = t.leaf(random(&[2, 2, 3, 3], 1), true);
        let (g, b) = (t.leaf(Tensor::full(&[2], 1.0), true), t.leaf(Tensor::zeros(&[2]), true));
        let y = t.conv2d(x, k, None, Padding::Same).unwrap();
        let y = t.batch_norm(y, g, b, &mut RunningStats::new(2), Mode::Train).unwrap();
        let y = t.sigmoid(y);
        let l = t.sum(y);
        t.backward(l).unwrap();
        prop_assert!(t.value(l).is_finite());
        for v in [x, k, g, b] {
            let grad = t.grad(v).unwrap();
            prop_assert_eq!(grad.len(), t.value(v).numel());
            prop_assert!(grad.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn backward_closed_forms_and_misuse() {
    let x0 = random(&[2, 3], 11);
    let mut t = Tape::new();
    let x = t.leaf(x0.clone(), true);
    let l = t.sum(x);
    t.backward(l).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));
    assert!(t.backward(l).is_err(), "second backward must be rejected");

    let mut t = Tape::new();
    let x = t.leaf(x0.clone(), true);
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    t.backward(l).unwrap();
    for (g, v) in t.grad(x).unwrap().iter().zip(x0.data()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }

    let mut t = Tape::new();
    let x = t.leaf(x0, true);
    assert!(t.backward(x).is_err(), "non-scalar loss must be rejected");
}

#[test]
fn conv_trivial_cases_and_shape_errors() {
    let x0 = random(&[1, 1, 3, 4], 12);
    let mut t = Tape::new();
    let x = t.constant(x0.clone());
    let k = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, k, Some(b), Padding::Same).unwrap();
    assert_eq!(t.value(y), &x0);
    let y = t.conv_transpose2d(x, k, None, 1).unwrap();
    assert_eq!(t.value(y), &x0);

    let z = t.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let k = t.constant(random(&[3, 2, 3, 3], 13));
    let b = t.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = t.conv2d(z, k, Some(b), Padding::Same).unwrap();
    for (c, chunk) in t.value(y).data().chunks(9).enumerate() {
        assert!(chunk.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
    }

    let wrong = t.constant(random(&[3, 1, 3, 3], 14));
    let err = t.conv2d(z, wrong, None, Padding::Same).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
    let k = t.constant(random(&[2, 2, 2, 2], 15));
    assert!(t.conv_transpose2d(z, k, None, 0).is_err());
}

#[test]
fn batch_norm_normalizes_and_rejects_single_element() {
    let mut t = Tape::new();
    // variance ≈ 3 so the eps in the denominator shifts the output variance by < 1e-5
    let spread = Tensor::new(vec![3, 2, 2, 3], random(&[3, 2, 2, 3], 16).data().iter().map(|v| 3.0 * v).collect()).unwrap();
    let x = t.constant(spread);
    let (g, b) = (t.constant(Tensor::full(&[2], 1.0)), t.constant(Tensor::zeros(&[2])));
    let y = t.batch_norm(x, g, b, &mut RunningStats::new(2), Mode::Train).unwrap();
    let v = t.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|n| v[(n * 2 + c) * 6..(n * 2 + c + 1) * 6].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
    }

    let x = t.constant(Tensor::full(&[2, 1, 2, 2], 0.7));
    let (g, b) = (t.constant(Tensor::full(&[1], 3.0)), t.constant(Tensor::full(&[1], -0.25)));
    let mut stats = RunningStats::new(1);
    stats.mean = vec![0.7];
    let y = t.batch_norm(x, g, b, &mut stats, Mode::Eval).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v + 0.25).abs() < 1e-12));

    let one = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    assert!(t.batch_norm(one, g, b, &mut RunningStats::new(1), Mode::Train).is_err());
}

fn scalar_param(value: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.add("w", Tensor::from_vec(vec![value])).unwrap();
    p
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = scalar_param(0.3);
    let mut opt = Adam::new(AdamConfig::default(), &p);
    p.iter_mut().for_each(|q| q.grad = Some(vec![0.0]));
    opt.step(&mut p).unwrap();
    assert_eq!(p.iter().next().unwrap().value.data(), &[0.3]);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    for g in [2.5, -0.01] {
        let mut p = scalar_param(1.0);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg, &p);
        p.iter_mut().for_each(|q| q.grad = Some(vec![g]));
        opt.step(&mut p).unwrap();
        // bias-corrected m = g, v = g², so the step is lr·g/(|g| + eps)
        let expect = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
        let w = p.iter().next().unwrap().value.data()[0];
        assert!((w - expect).abs() < 1e-15, "{w} vs {expect}");
    }
}

#[test]
fn adam_descends_a_parabola() {
    let mut p = scalar_param(1.0);
    let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &p);
    for _ in 0..100 {
        let w = p.iter().next().unwrap().value.data()[0];
        p.iter_mut().for_each(|q| q.grad = Some(vec![2.0 * w]));
        opt.step(&mut p).unwrap();
    }
    let w = p.iter().next().unwrap().value.data()[0];
    assert!(w.abs() < 0.1, "w = {w}");
}

#[test]
fn adam_rejects_missing_gradients() {
    let mut p = scalar_param(1.0);
    let mut opt = Adam::new(AdamConfig::default(), &p);
    assert!(opt.step(&mut p).is_err());
    assert_eq!(opt.steps(), 0);
}

fn small_sed() -> SedModel {
    let arch = SedArch {
        num_classes: 3,
        mel_bins: 8,
        widths: vec![2, 3],
        ..SedArch::default()
    };
    SedModel::new(arch, 21).unwrap()
}

/// Full SED loss (train-mode BN, BCE on the clipwise output) for the current parameters.
fn sed_loss(model: &SedModel, feats: &Tensor, target: &Tensor, grads: bool) -> (f64, Tape, wlss_core::autodiff::Bound) {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, grads);
    let x = tape.constant(feats.clone());
    let mut stats = model.stats.clone();
    let (_, clip) = model.forward(&mut tape, &bound, x, Mode::Train, &mut stats).unwrap();
    let loss = tape.bce_loss(clip, target).unwrap();
    if grads {
        tape.backward(loss).unwrap();
    }
    (tape.value(loss).data()[0], tape, bound)
}

#[test]
fn sed_network_gradient_matches_differences() {
    let mut model = small_sed();
    let feats = random(&[2, 1, 12, 8], 22);
    let target = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let (_, mut tape, bound) = sed_loss(&model, &feats, &target, true);
    model.params.collect_grads(&mut tape, &bound);
    let mut rng = Pcg64::seed_from_u64(23);
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let mut checked = 0;
    while checked < 5 {
        let id = model.params.id(&names[rng.random_range(0..names.len())]).unwrap();
        let n = model.params.get(id).value.numel();
        let j = rng.random_range(0..n);
        let analytic = model.params.get(id).grad.as_ref().unwrap()[j];
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params.get_mut(id).value.data_mut()[j] += delta;
            sed_loss(&m, &feats, &target, false).0
        };
        let h = gradcheck::STEP;
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        if analytic.abs().max(numeric.abs()) < 1e-8 {
            continue; // parameter outside the max-pooled path this step
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel <= 1e-3, "{} [{j}]: analytic {analytic} numeric {numeric}", model.params.get(id).name);
        checked += 1;
    }
}

#[test]
fn same_seed_gives_identical_trajectories() {
    let run = || {
        let mut model = small_sed();
        let feats = random(&[2, 1, 12, 8], 24);
        let target = Tensor::new(vec![2, 3], vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &model.params);
        let mut trace = Vec::new();
        for _ in 0..5 {
            let (_, mut tape, bound) = sed_loss(&model, &feats, &target, true);
            model.params.collect_grads(&mut tape, &bound);
            opt.step(&mut model.params).unwrap();
            trace.extend(model.params.iter().flat_map(|p| p.value.data().to_vec()));
        }
        trace
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
