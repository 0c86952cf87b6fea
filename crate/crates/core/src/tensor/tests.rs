use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::testutil::{grad_check, random};

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    assert_eq!(Tensor::<f32>::zeros(&[2, 3]).len(), 6);
}

#[test]
fn non_finite_leaf_rejected() {
    let tape = Tape::<f64>::new();
    let err = tape.param(Tensor::scalar(f64::NAN)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

#[test]
fn non_finite_is_raised_at_the_producing_op() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(1e300)).unwrap();
    let err = x.mul(x).unwrap_err();
    match err {
        Error::NonFinite { op } => assert_eq!(op, "mul"),
        other => panic!("{other}"),
    }
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 1, 4, 5], &mut rng);
    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone()).unwrap();
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap();
    let y = xv.conv2d(k, 1, 0).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn conv_hand_sum() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap()).unwrap();
    let k = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap()).unwrap();
    let y = x.conv2d(k, 1, 0).unwrap();
    assert_eq!(y.value().shape(), &[1, 1, 1, 1]);
    assert_eq!(y.value().data(), &[5.0]);
}

#[test]
fn conv_output_extent_and_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 7, 6])).unwrap();
    let k = tape.constant(Tensor::zeros(&[3, 2, 3, 3])).unwrap();
    assert_eq!(x.conv2d(k, 2, 1).unwrap().shape(), vec![1, 3, 4, 3]);
    let wrong_c = tape.constant(Tensor::zeros(&[3, 1, 3, 3])).unwrap();
    let err = x.conv2d(wrong_c, 1, 0).unwrap_err();
    assert!(err.to_string().contains("[1, 2, 7, 6]"), "{err}");
    let too_big = tape.constant(Tensor::zeros(&[1, 2, 9, 9])).unwrap();
    assert!(matches!(x.conv2d(too_big, 1, 0), Err(Error::Dimension(_))));
    assert!(x.conv2d(k, 0, 0).is_err());
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let err = grad_check(vec![x.clone(), k.clone()], &move |_, v| v[0].conv2d(v[1], stride, pad));
        assert!(err < 1e-5, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn maxpool_picks_window_max() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap()).unwrap();
    let p = x.maxpool2d(2, 2).unwrap();
    assert_eq!(p.output.value().data(), &[4.0]);
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[1, 1, 4, 4], 0.5)).unwrap();
    let p = x.maxpool2d(2, 2).unwrap();
    assert!(p.output.value().data().iter().all(|&v| v == 0.5));
    let loss = p.output.sum().unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(x).unwrap().data().to_vec();
    let mut want = vec![0.0; 16];
    for idx in [0, 2, 8, 10] {
        want[idx] = 1.0;
    }
    assert_eq!(g, want);
}

#[test]
fn maxpool_window_too_large() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 3])).unwrap();
    assert!(matches!(x.maxpool2d(3, 1), Err(Error::Dimension(_))));
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    // Distinct values spaced far beyond the perturbation keep argmax fixed.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut order: Vec<usize> = (0..2 * 2 * 6 * 6).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::from_fn(&[2, 2, 6, 6], |i| order[i] as f64 * 0.01);
    let err = grad_check(vec![x], &|_, v| Ok(v[0].maxpool2d(2, 2)?.output));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn batch_norm_zero_variance_channel_outputs_beta() {
    let tape = Tape::<f64>::new();
    let x = Tensor::from_fn(&[3, 2, 2, 2], |i| if (i / 4) % 2 == 0 { 7.0 } else { i as f64 });
    let x = tape.constant(x).unwrap();
    let gamma = tape.constant(Tensor::from_f64(&[2], &[2.0, 1.0]).unwrap()).unwrap();
    let beta = tape.constant(Tensor::from_f64(&[2], &[0.25, 0.0]).unwrap()).unwrap();
    let (y, _, _) = x.batch_norm_train(gamma, beta, BN_EPS).unwrap();
    let y = y.value();
    for (i, &v) in y.data().iter().enumerate() {
        if (i / 4) % 2 == 0 {
            assert_eq!(v, 0.25);
        }
    }
}

#[test]
fn batch_norm_train_standardizes_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // eps shifts the output variance by eps/var; a spread of ~20 keeps that
    // below 1e-7.
    let x = Tensor::from_fn(&[4, 3, 4, 4], |_| rng.gen_range(-40.0..40.0) + 3.0);
    let tape = Tape::<f64>::new();
    let xv = tape.constant(x).unwrap();
    let gamma = tape.constant(Tensor::ones(&[3])).unwrap();
    let beta = tape.constant(Tensor::zeros(&[3])).unwrap();
    let (y, _, _) = xv.batch_norm_train(gamma, beta, BN_EPS).unwrap();
    let y = y.value();
    for c in 0..3 {
        let vals: Vec<f64> = (0..y.len()).filter(|i| (i / 16) % 3 == c).map(|i| y.data()[i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
}

#[test]
fn batch_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[4, 3, 4, 4], &mut rng);
    let gamma = Tensor::from_fn(&[3], |_| rng.gen_range(0.5..1.5));
    let beta = random(&[3], &mut rng);
    let err = grad_check(vec![x, gamma, beta], &|_, v| {
        Ok(v[0].batch_norm_train(v[1], v[2], BN_EPS)?.0)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batch_norm_eval_requires_running_stats() {
    let bn = BatchNorm::<f64>::new(2);
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
    let g = tape.constant(Tensor::ones(&[2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let err = bn.forward(x, g, b, Mode::Eval).unwrap_err();
    assert_eq!(err.to_string(), "uninitialized running statistics");
}

#[test]
fn batch_norm_running_stats_follow_momentum() {
    let mut bn = BatchNorm::<f64>::new(1);
    let tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::ones(&[1])).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    let first = tape.constant(Tensor::from_f64(&[2, 1, 1, 1], &[0.0, 2.0]).unwrap()).unwrap();
    let (_, stats) = bn.forward(first, g, b, Mode::Train).unwrap();
    bn.update(&stats.unwrap());
    let (m, v) = bn.running().unwrap();
    assert_eq!((m[0], v[0]), (1.0, 2.0));
    let second = tape.constant(Tensor::from_f64(&[2, 1, 1, 1], &[4.0, 4.0]).unwrap()).unwrap();
    let (_, stats) = bn.forward(second, g, b, Mode::Train).unwrap();
    bn.update(&stats.unwrap());
    let (m, v) = bn.running().unwrap();
    assert!((m[0] - (0.9 * 1.0 + 0.1 * 4.0)).abs() < 1e-12);
    assert!((v[0] - 0.9 * 2.0).abs() < 1e-12);

    let x = tape.constant(Tensor::from_f64(&[1, 1, 1, 1], &[3.0]).unwrap()).unwrap();
    let (y, none) = bn.forward(x, g, b, Mode::Eval).unwrap();
    assert!(none.is_none());
    let want = (3.0 - m[0]) / (v[0] + BN_EPS).sqrt();
    assert!((y.value().data()[0] - want).abs() < 1e-12);
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 7], &mut rng);
    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone()).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(*xv.dropout(0.0, mode, &mut rng).unwrap().value(), x);
    }
    assert_eq!(*xv.dropout(0.7, Mode::Eval, &mut rng).unwrap().value(), x);
    assert!(xv.dropout(1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_survivor_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::<f64>::ones(&[100_000])).unwrap();
    let y = x.dropout(0.3, Mode::Train, &mut rng).unwrap();
    let y = y.value();
    let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
    assert!((survivors - 0.7).abs() < 0.01, "{survivors}");
    assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
}

#[test]
fn residual_add_identity_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[2, 3, 4, 4], &mut rng);
    let tape = Tape::<f64>::new();
    let av = tape.param(a.clone()).unwrap();
    let bv = tape.param(Tensor::zeros(&[2, 3, 4, 4])).unwrap();
    let y = av.residual_add(bv).unwrap();
    assert_eq!(*y.value(), a);
    let g = tape.backward(y.sum().unwrap()).unwrap();
    assert!(g.get(av).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.get(bv).unwrap().data().iter().all(|&v| v == 1.0));

    let wrong = tape.constant(Tensor::zeros(&[2, 3, 4, 5])).unwrap();
    let err = av.residual_add(wrong).unwrap_err();
    assert!(err.to_string().contains("spatial"), "{err}");
}

#[test]
fn residual_projection_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&[2, 4, 3, 3], &mut rng);
    let b = random(&[2, 2, 3, 3], &mut rng);
    let proj = random(&[4, 2, 1, 1], &mut rng);
    let err = grad_check(vec![a, b, proj], &|_, v| v[0].residual_add(v[1].conv2d(v[2], 1, 0)?));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.5, 0.0]).unwrap()).unwrap();
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_of_square_accumulates_fan_out() {
    let tape = Tape::<f64>::new();
    let vals = [1.0, -2.0, 3.5, 0.25];
    let x = tape.param(Tensor::from_f64(&[4], &vals).unwrap()).unwrap();
    let g = tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
    let want: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(x).unwrap().data(), want.as_slice());
}

#[test]
fn fan_out_sums_k_contributions() {
    // x feeds k identical branches; the gradient is k times one branch's.
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[3], &[0.5, 1.0, -1.0]).unwrap()).unwrap();
    let k = 5;
    let mut acc = x.scale(2.0).unwrap();
    for _ in 1..k {
        acc = acc.add(x.scale(2.0).unwrap()).unwrap();
    }
    let g = tape.backward(acc.sum().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0 * k as f64; 3]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::<f64>::zeros(&[2])).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut params = vec![Param::new("w", Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap())];
    let before = params[0].value.clone();
    let mut adam = AdamState::new(AdamConfig::default(), &params);
    for _ in 0..3 {
        params[0].grad = Some(Tensor::zeros(&[3]));
        adam.step(&mut params).unwrap();
    }
    assert_eq!(params[0].value, before);
    assert_eq!(adam.steps(), 3);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = vec![Param::new("w", Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap())];
    let before = params[0].value.clone();
    params[0].grad = Some(Tensor::from_f64(&[3], &[0.3, -4.0, 0.05]).unwrap());
    let mut adam = AdamState::new(AdamConfig::default(), &params);
    adam.step(&mut params).unwrap();
    let signs = [1.0, -1.0, 1.0];
    for i in 0..3 {
        let delta = params[0].value.data()[i] - before.data()[i];
        assert_eq!(delta.signum(), -signs[i]);
        assert!((delta.abs() - 1e-4).abs() / 1e-4 < 1e-6, "{delta}");
    }
}

#[test]
fn adam_missing_gradient_names_parameter() {
    let mut params = vec![
        Param::new("conv1.weight", Tensor::<f64>::zeros(&[2])),
        Param::new("conv1.bias", Tensor::<f64>::zeros(&[2])),
    ];
    params[0].grad = Some(Tensor::ones(&[2]));
    let mut adam = AdamState::new(AdamConfig::default(), &params);
    let err = adam.step(&mut params).unwrap_err();
    assert!(err.to_string().contains("conv1.bias"), "{err}");
    assert_eq!(params[0].value.data(), &[0.0, 0.0]);
}

#[test]
fn adam_descends_quadratic_bowl() {
    let mut params = vec![Param::new("w", Tensor::<f64>::from_f64(&[3], &[0.5, -0.3, 0.8]).unwrap())];
    let cfg = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(cfg, &params);
    let norm = |p: &Param<f64>| p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let initial = norm(&params[0]);
    let mut norms = vec![initial];
    for _ in 0..200 {
        let tape = Tape::<f64>::new();
        let w = tape.bind_params(&params).unwrap();
        let loss = w[0].mul(w[0]).unwrap().sum().unwrap();
        tape.backward(loss).unwrap().accumulate_into(&mut params, &w);
        adam.step(&mut params).unwrap();
        norms.push(norm(&params[0]));
    }
    for t in 5..200 {
        assert!(norms[t + 1] < norms[t], "step {t}: {} -> {}", norms[t], norms[t + 1]);
    }
    assert!(norms[200] < 1e-2 * initial, "{}", norms[200]);
}
