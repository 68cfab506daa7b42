use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::data::{split, synth_generate, SeriesFrame, SplitSpec, SynthSpec};
use crate::models::{Ablation, ModelConfig};

fn tiny_model(lookback: usize, horizon: usize) -> ModelConfig {
    ModelConfig {
        lookback,
        horizon,
        patch_size: 8,
        stride: 4,
        d_model: 16,
        scorer_hidden: 16,
        head_hidden: 32,
        ..ModelConfig::default()
    }
}

fn sine_frame(length: usize) -> SeriesFrame {
    synth_generate(&SynthSpec {
        length,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn adam_first_step_is_sign_scaled() {
    let mut store = ParamStore::<f64>::new();
    let id = store
        .register("w", Tensor::from_vec(vec![1.0, -2.0, 0.5]))
        .unwrap();
    store.grad_mut(id).copy_from_slice(&[0.3, -4.0, 1e-3]);
    let mut adam = Adam::new(&store, 0.01, 0.9, 0.999, 1e-8);
    adam.step(&mut store);
    let want = [
        1.0 - 0.01 * 0.3 / (0.3 + 1e-8),
        -2.0 + 0.01 * 4.0 / (4.0 + 1e-8),
        0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8),
    ];
    for (a, b) in store.value(id).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(store.step(), 1);
}

#[test]
fn adam_zero_grad_keeps_values_and_decays_moments() {
    let mut store = ParamStore::<f64>::new();
    let id = store.register("w", Tensor::from_vec(vec![1.0])).unwrap();
    let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
    adam.step(&mut store);
    assert_eq!(store.value(id).data(), &[1.0]);
    store.grad_mut(id)[0] = 2.0;
    adam.step(&mut store);
    store.zero_grad();
    let before = store.value(id).data()[0];
    let (m0, v0) = (adam.moments(0).0[0], adam.moments(0).1[0]);
    // bias-corrected moments still move the value; raw moments decay geometrically
    adam.step(&mut store);
    let (m1, v1) = (adam.moments(0).0[0], adam.moments(0).1[0]);
    assert!((m1 - 0.9 * m0).abs() < 1e-15 && (v1 - 0.999 * v0).abs() < 1e-15);
    assert!(store.value(id).data()[0] < before);

    let mut zero = ParamStore::<f64>::new();
    let z = zero.register("w", Tensor::from_vec(vec![3.0])).unwrap();
    let mut fresh = Adam::new(&zero, 0.1, 0.9, 0.999, 1e-8);
    fresh.step(&mut zero);
    assert_eq!(zero.value(z).data(), &[3.0]);
}

#[test]
fn adam_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let init: Vec<f32> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads: Vec<f32> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let id = store.register("w", Tensor::from_vec(init.clone())).unwrap();
        let mut adam = Adam::new(&store, 1e-3, 0.9, 0.999, 1e-8);
        for _ in 0..3 {
            store.grad_mut(id).copy_from_slice(&grads);
            adam.step(&mut store);
        }
        store
            .value(id)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn early_stopping_patience_one() {
    let mut es = EarlyStopping::new(1);
    assert_eq!(es.observe(1, 0.5), Verdict::Improved);
    assert_eq!(es.observe(2, 0.6), Verdict::Stop);
    assert_eq!(es.best_epoch(), 1);
    let mut es = EarlyStopping::new(3);
    let verdicts: Vec<_> = [1.0, 0.9, 0.95, 0.91, 0.8, 0.85, 0.85, 0.9]
        .iter()
        .enumerate()
        .map(|(i, &v)| es.observe(i + 1, v))
        .collect();
    assert_eq!(verdicts.last(), Some(&Verdict::Stop));
    assert_eq!((es.best_epoch(), es.best()), (5, 0.8));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig {
        batch_size: 48,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        batch_size: 128,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        patience: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        min_batch_size: 16,
        batch_size: 8,
        ..Default::default()
    }
    .validate()
    .is_err());
}

fn short_run(seed: u64) -> (RunRecord, Forecaster<f32>) {
    let frame = sine_frame(400);
    let (tr, va, _) = split(&frame, &SplitSpec::default(), 40).unwrap();
    let train_set = WindowSet::new(&tr, 32, 8, 1).unwrap();
    let val_set = WindowSet::new(&va, 32, 8, 1).unwrap();
    let mut model = Forecaster::<f32>::new(tiny_model(32, 8), seed).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 3,
        batch_size: 32,
        seed,
        ..Default::default()
    };
    let rec = train(&mut model, &train_set, &val_set, &cfg).unwrap();
    (rec, model)
}

#[test]
fn training_is_deterministic_and_counts_steps() {
    let (a, model) = short_run(5);
    let (b, _) = short_run(5);
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.train_losses()), bits(b.train_losses()));
    assert_eq!(bits(a.val_losses()), bits(b.val_losses()));
    let per_epoch = a.train_windows.div_ceil(a.batch_size) as u64;
    assert_eq!(a.optimizer_steps, per_epoch * a.epochs.len() as u64);
    assert_eq!(model.store().step(), a.optimizer_steps);
    assert!(a.val_losses().iter().all(|&v| a.best_val_loss <= v));
    let (c, _) = short_run(6);
    assert_ne!(bits(a.train_losses()), bits(c.train_losses()));
}

#[test]
fn restores_best_validation_weights() {
    let frame = sine_frame(400);
    let (tr, va, _) = split(&frame, &SplitSpec::default(), 40).unwrap();
    let train_set = WindowSet::new(&tr, 32, 8, 1).unwrap();
    let val_set = WindowSet::new(&va, 32, 8, 1).unwrap();
    let mut model = Forecaster::<f64>::new(tiny_model(32, 8), 1).unwrap();
    // a large step size makes validation loss bounce
    let cfg = TrainConfig {
        lr: 3e-2,
        max_epochs: 6,
        patience: 1,
        batch_size: 16,
        ..Default::default()
    };
    let rec = train(&mut model, &train_set, &val_set, &cfg).unwrap();
    let val = evaluate(&model, &val_set, 64).unwrap();
    assert!((val.mse - rec.best_val_loss).abs() < 1e-12);
    if rec.stop == StopReason::Patience {
        assert_eq!(rec.best_epoch, rec.epochs.len() - 1);
    }
}

#[test]
fn divergence_keeps_last_finite_weights() {
    let frame = sine_frame(300);
    let (tr, va, _) = split(&frame, &SplitSpec::default(), 40).unwrap();
    let train_set = WindowSet::new(&tr, 32, 8, 1).unwrap();
    let val_set = WindowSet::new(&va, 32, 8, 1).unwrap();
    let mut model = Forecaster::<f32>::new(tiny_model(32, 8), 2).unwrap();
    let initial = model.store().clone();
    let cfg = TrainConfig {
        lr: 1e38,
        max_epochs: 3,
        batch_size: 8,
        ..Default::default()
    };
    match train(&mut model, &train_set, &val_set, &cfg) {
        Err(TrainError::Diverged { epoch, record }) => {
            assert_eq!(epoch, 1);
            assert_eq!(record.stop, StopReason::Diverged);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    for (id, _, t) in initial.iter() {
        assert_eq!(model.store().value(id), t);
    }
}

#[test]
fn batch_halving_under_memory_budget() {
    let frame = sine_frame(300);
    let set = WindowSet::new(&frame, 32, 8, 1).unwrap();
    let model = Forecaster::<f32>::new(tiny_model(32, 8), 0).unwrap();
    let full = probe_bytes(&model, &set, 64).unwrap();
    let eight = probe_bytes(&model, &set, 8).unwrap();
    let cfg = TrainConfig {
        memory_budget_bytes: Some(full / 3),
        ..Default::default()
    };
    let b = fit_batch_size(&model, &set, &cfg).unwrap();
    assert!((8..64).contains(&b));
    assert!(probe_bytes(&model, &set, b).unwrap() <= full / 3);
    let cfg = TrainConfig {
        memory_budget_bytes: Some(eight / 2),
        ..Default::default()
    };
    assert!(matches!(
        fit_batch_size(&model, &set, &cfg),
        Err(TrainError::OutOfMemory { batch: 8, .. })
    ));
}

#[test]
fn one_step_lowers_batch_loss() {
    let frame = synth_generate(&SynthSpec::regime_shift(3, 600, 2)).unwrap();
    let set = WindowSet::new(&frame, 48, 12, 1).unwrap();
    let mut passes = 0;
    for seed in 0..20u64 {
        let mut model = Forecaster::<f32>::new(
            ModelConfig {
                dropout: 0.0,
                ..tiny_model(48, 12)
            },
            seed,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..16).map(|_| rng.random_range(0..set.len())).collect();
        let batch = set.batch::<f32>(&idx);
        let loss_of = |m: &Forecaster<f32>| {
            let mut g = Graph::new();
            let out = m
                .forward(&mut g, &batch.x, &mut ForwardCtx::eval())
                .unwrap();
            let y = g.constant(batch.y.clone());
            let l = mse_loss(&mut g, out.prediction, y).unwrap();
            (g, l)
        };
        let (g, l) = loss_of(&model);
        let before = g.value(l).data()[0];
        let grads = g.backward(l).unwrap();
        g.accumulate(&grads, model.store_mut());
        let mut adam = Adam::new(model.store(), 1e-3, 0.9, 0.999, 1e-8);
        adam.step(model.store_mut());
        let (g2, l2) = loss_of(&model);
        if g2.value(l2).data()[0] < before {
            passes += 1;
        }
    }
    assert!(passes >= 18, "{passes}/20");
}

#[test]
fn learns_a_noiseless_sinusoid() {
    let frame = sine_frame(1200);
    let (tr, va, _) = split(&frame, &SplitSpec::default(), 120).unwrap();
    let train_set = WindowSet::new(&tr, 96, 24, 1).unwrap();
    let val_set = WindowSet::new(&va, 96, 24, 1).unwrap();
    let cfg = ModelConfig {
        lookback: 96,
        horizon: 24,
        d_model: 16,
        scorer_hidden: 32,
        head_hidden: 64,
        ..ModelConfig::default()
    };
    let mut model = Forecaster::<f32>::new(cfg, 0).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        max_epochs: 50,
        batch_size: 32,
        ..Default::default()
    };
    let rec = train(&mut model, &train_set, &val_set, &tc).unwrap();
    assert!(rec.epochs.len() <= 50);
    assert!(rec.best_val_loss < 0.01, "val mse {}", rec.best_val_loss);
}

#[test]
fn overhead_of_identical_models_is_zero() {
    let frame = sine_frame(400);
    let set = WindowSet::new(&frame, 96, 24, 1).unwrap();
    let batch = set.batch::<f32>(&(0..32).collect::<Vec<_>>());
    let model = Forecaster::<f32>::new(
        ModelConfig {
            lookback: 96,
            horizon: 24,
            d_model: 32,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let rep = measure_overhead(&model, &model, &batch, &TrainConfig::default(), 41).unwrap();
    assert_eq!(rep.memory_overhead, 0.0);
    assert!(rep.train_overhead.abs() <= 0.02, "{rep:?}");
    assert!(rep.infer_overhead.is_finite());
}

#[test]
fn srs_arm_costs_more_than_plain_arm() {
    let frame = sine_frame(400);
    let set = WindowSet::new(&frame, 96, 24, 1).unwrap();
    let batch = set.batch::<f32>(&(0..16).collect::<Vec<_>>());
    let cfg = ModelConfig {
        lookback: 96,
        horizon: 24,
        d_model: 16,
        scorer_hidden: 16,
        head_hidden: 32,
        ..ModelConfig::default()
    };
    let with = Forecaster::<f32>::new(cfg.clone(), 0).unwrap();
    let without = Forecaster::<f32>::new(cfg.with_ablation(Ablation::NoSrs), 0).unwrap();
    let rep = measure_overhead(&with, &without, &batch, &TrainConfig::default(), 3).unwrap();
    for v in [rep.train_overhead, rep.infer_overhead, rep.memory_overhead] {
        assert!(v.is_finite());
    }
    assert!(rep.graph_bytes_with >= rep.graph_bytes_without);
    assert!(rep.params_with > rep.params_without);
}
