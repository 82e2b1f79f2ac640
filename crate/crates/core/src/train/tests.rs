use super::*;
use crate::features::Profile;
use crate::graph::adjacency_from_columns;
use crate::model::init_params;
use chrono::NaiveDate;
use proptest::prelude::*;
use rand::Rng;

/// `n` rows of `d` uniform features with a noiseless linear target.
fn linear_data(seed: u64, n: usize, d: usize) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|j| 0.8 - 0.3 * j as f64).collect();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let r: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        y.push(r.iter().zip(&w).map(|(a, b)| a * b).sum());
        rows.push(r);
    }
    let t0 = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let ts = (0..n).map(|i| t0 + chrono::Duration::days(i as i64)).collect();
    FeatureMatrix::from_rows((0..d).map(|j| format!("x{j}")).collect(), rows, y, ts, Profile::Eia).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn adjacency(x: &FeatureMatrix) -> Adjacency {
    adjacency_from_columns(&x.columns(), 0.3).unwrap()
}

#[test]
fn mse_cases() {
    assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(mse_loss(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
    assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    assert!(mse_loss(&[], &[]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..33).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..33).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut s = 0.0;
    for i in 0..33 {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    assert_eq!(mse_loss(&a, &b).unwrap(), s / 33.0);
}

fn one_tensor(values: Vec<f64>) -> NetworkParams {
    let mut p = init_params(2, &small_model(), 0).unwrap();
    p.tensors.clear();
    p.tensors.insert("w".into(), Tensor::vector(values));
    p
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = one_tensor(vec![0.5, -1.5]);
    let before = p.clone();
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0, 0.0]))]);
    adam_step(&mut p, &grads, &mut AdamState::default(), 1e-3).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = one_tensor(vec![0.0, 0.0, 0.0]);
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![3.0, -0.02, 1e-3]))]);
    adam_step(&mut p, &grads, &mut AdamState::default(), 1e-2).unwrap();
    let w = p.get("w").unwrap().data();
    // bias-corrected first step: -lr · g / (|g| + eps)
    for (got, g) in w.iter().zip([3.0f64, -0.02, 1e-3]) {
        assert!((got + 1e-2 * g.signum()).abs() < 1e-7, "{got}");
    }
}

#[test]
fn adam_two_steps_match_hand_rolled() {
    let (lr, g1, g2, w0) = (0.05, 0.7, -0.2, 1.3);
    let mut p = one_tensor(vec![w0]);
    let mut st = AdamState::default();
    for g in [g1, g2] {
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![g]))]);
        adam_step(&mut p, &grads, &mut st, lr).unwrap();
    }
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let m1 = (1.0 - b1) * g1;
    let v1 = (1.0 - b2) * g1 * g1;
    let w1 = w0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let m2 = b1 * m1 + (1.0 - b1) * g2;
    let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
    let w2 = w1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
    assert!((p.get("w").unwrap().data()[0] - w2).abs() < 1e-12);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut p = one_tensor(vec![0.0]);
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![f64::NAN]))]);
    assert!(matches!(
        adam_step(&mut p, &grads, &mut AdamState::default(), 1e-3),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn zero_epochs_returns_initial_params() {
    let x = linear_data(1, 30, 3);
    let adj = adjacency(&x);
    let cfg = TrainConfig {
        epochs: 0,
        seed: 4,
        ..TrainConfig::default()
    };
    let (p, h) = fit(&x, &adj, &small_model(), &cfg).unwrap();
    assert_eq!(p, init_params(3, &small_model(), 4).unwrap());
    assert!(h.epochs.is_empty());
    assert_eq!(h.best_epoch, None);
}

#[test]
fn validation_carve_out() {
    let x = linear_data(1, 64, 3);
    let (a, b) = carve_validation(&x, 0.1).unwrap();
    assert_eq!((a.n_rows(), b.n_rows()), (57, 7));
    assert_eq!(carve_validation(&linear_data(1, 5, 3), 0.1).unwrap().1.n_rows(), 1);
    assert!(carve_validation(&linear_data(1, 2, 3), 0.1).is_err());
    assert!(carve_validation(&linear_data(1, 2, 3), 0.5).is_err());
}

#[test]
fn improving_run_keeps_rate_and_budget() {
    let x = linear_data(2, 40, 3);
    let adj = adjacency(&x);
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 8,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let (_, h) = fit(&x, &adj, &small_model(), &cfg).unwrap();
    assert!(h.epochs.windows(2).all(|w| w[1].val_loss < w[0].val_loss), "{h:?}");
    assert_eq!(h.epochs.len(), 8);
    assert!(h.epochs.iter().all(|e| e.learning_rate == 1e-3));
    assert_eq!(h.best_epoch, Some(7));
}

#[test]
fn plateau_rules_and_best_snapshot() {
    let x = linear_data(3, 40, 3);
    let adj = adjacency(&x);
    // a large rate makes validation loss bounce, exercising both rules
    let cfg = TrainConfig {
        epochs: 80,
        batch_size: 4,
        learning_rate: 5e-2,
        early_stop_patience: 6,
        lr_reduce_patience: 2,
        ..TrainConfig::default()
    };
    let (p, h) = fit(&x, &adj, &small_model(), &cfg).unwrap();
    let lrs: Vec<f64> = h.epochs.iter().map(|e| e.learning_rate).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let best = h.best_epoch.unwrap();
    let min = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(h.epochs[best].val_loss, min);
    assert_eq!(h.best_val_loss, Some(min));
    if h.stopped_early {
        assert!(h.epochs.len() - 1 - best >= cfg.early_stop_patience);
    }
    let (_, val) = carve_validation(&x, 0.1).unwrap();
    assert_eq!(evaluate_mse(&p, &adj, &val).unwrap(), min);
}

#[test]
fn fit_is_deterministic() {
    let x = linear_data(4, 30, 4);
    let adj = adjacency(&x);
    let model = ModelConfig {
        dropout: 0.3,
        ..small_model()
    };
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 5,
        shuffle: true,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = fit(&x, &adj, &model, &cfg).unwrap();
    let b = fit(&x, &adj, &model, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.to_jsonl(), b.1.to_jsonl());
    assert_eq!(a.1.to_jsonl().lines().count(), 4);
}

#[test]
fn short_overfit_run_reduces_loss() {
    let x = linear_data(5, 32, 3);
    let adj = adjacency(&x);
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 8,
        learning_rate: 3e-3,
        early_stop_patience: 1000,
        lr_reduce_patience: 1000,
        ..TrainConfig::default()
    };
    let (_, h) = fit(&x, &adj, &small_model(), &cfg).unwrap();
    let first = h.epochs[0].train_loss;
    let last = h.epochs.last().unwrap().train_loss;
    assert!(last < 0.05 * first, "train loss {first} -> {last}");
}

#[test]
fn search_single_trial() {
    let r = random_search(&SearchSpace::eia(), 1, 3, |p, _| Ok(p.learning_rate)).unwrap();
    assert_eq!(r.trials.len(), 1);
    assert_eq!(r.best, r.trials[0]);
}

#[test]
fn search_finds_rigged_point() {
    let space = SearchSpace {
        hidden_dim: Dim::Choice { values: vec![16.0, 64.0] },
        batch_size: Dim::Fixed { value: 16.0 },
        epochs: Dim::Fixed { value: 30.0 },
        dropout: Dim::Fixed { value: 0.1 },
        learning_rate: Dim::Fixed { value: 1e-3 },
    };
    let r = random_search(&space, 20, 7, |p, _| Ok(if p.hidden_dim == 64 { 0.01 } else { 5.0 })).unwrap();
    assert_eq!(r.best.point.hidden_dim, 64);
    assert_eq!(r.to_jsonl().lines().count(), 20);
}

#[test]
fn search_records_failures() {
    let r = random_search(&SearchSpace::ett(), 6, 1, |p, _| {
        if p.batch_size == 16 {
            Err(Error::NonFinite("diverged".into()))
        } else {
            Ok(p.hidden_dim as f64)
        }
    });
    if let Ok(r) = r {
        assert!(r.trials.iter().filter(|t| t.point.batch_size == 16).all(|t| t.objective.is_none()));
        assert!(r.best.objective.is_some());
    }
    assert!(random_search(&SearchSpace::eia(), 2, 1, |_, _| Ok(f64::NAN)).is_err());
}

#[test]
fn empty_space_is_rejected() {
    let mut s = SearchSpace::eia();
    s.batch_size = Dim::Choice { values: vec![] };
    assert!(random_search(&s, 3, 0, |_, _| Ok(0.0)).is_err());
    let mut s = SearchSpace::eia();
    s.hidden_dim = Dim::Int { lo: 64, hi: 16, step: 4 };
    assert!(s.validate().is_err());
    assert!(random_search(&SearchSpace::eia(), 0, 0, |_, _| Ok(0.0)).is_err());
    assert!(SearchSpace::preset("nope").is_err());
}

#[test]
fn hyperopt_end_to_end() {
    let x = linear_data(6, 40, 3);
    let adj = adjacency(&x);
    let space = SearchSpace {
        hidden_dim: Dim::Choice { values: vec![16.0] },
        batch_size: Dim::Choice { values: vec![8.0, 16.0] },
        epochs: Dim::Int { lo: 2, hi: 4, step: 1 },
        dropout: Dim::Uniform { lo: 0.0, hi: 0.2, step: Some(0.1) },
        learning_rate: Dim::LogUniform { lo: 1e-4, hi: 1e-2 },
    };
    let r = hyperopt(&x, &adj, &small_model(), &TrainConfig::default(), &space, 3, 11).unwrap();
    let again = hyperopt(&x, &adj, &small_model(), &TrainConfig::default(), &space, 3, 11).unwrap();
    assert_eq!(r, again);
    let best = r.best.objective.unwrap();
    assert!(r.trials.iter().all(|t| t.objective.unwrap() >= best));
}

proptest! {
    #[test]
    fn sampled_points_stay_in_range(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for space in [SearchSpace::eia(), SearchSpace::ett(), SearchSpace::solar()] {
            let p = space.sample(&mut rng);
            prop_assert!(space.contains(&p), "{:?}", p);
            prop_assert!((1e-4..=1e-2).contains(&p.learning_rate));
            prop_assert!(p.hidden_dim % 4 == 0);
        }
    }

    #[test]
    fn derived_seeds_differ(master in 0u64..1000, a in 0u64..50, b in 50u64..100) {
        prop_assert_ne!(derive_seed(master, a), derive_seed(master, b));
    }
}
