use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, TrainError};
use crate::autodiff::Graph;
use crate::data::Batch;
use crate::models::{mse_loss, Forecaster};
use crate::nn::ForwardCtx;
use crate::scalar::Scalar;

/// Per-batch cost of a model "with" an added component against a matched
/// model "without" it. Relative fields are `with / without - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub batch_size: usize,
    pub reps: usize,
    pub train_seconds_with: f64,
    pub train_seconds_without: f64,
    pub infer_seconds_with: f64,
    pub infer_seconds_without: f64,
    pub graph_bytes_with: usize,
    pub graph_bytes_without: usize,
    pub params_with: usize,
    pub params_without: usize,
    pub train_overhead: f64,
    pub infer_overhead: f64,
    pub memory_overhead: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of per-repetition ratios, so slow clock drift cancels within each pair.
fn paired_overhead(with: &[f64], without: &[f64]) -> f64 {
    median(with.iter().zip(without).map(|(a, b)| a / b).collect()) - 1.0
}

struct Arm<S> {
    model: Forecaster<S>,
    adam: Adam<S>,
    train: Vec<f64>,
    infer: Vec<f64>,
    bytes: usize,
}

impl<S: Scalar> Arm<S> {
    fn new(model: &Forecaster<S>, cfg: &TrainConfig) -> Self {
        let model = model.clone();
        let adam = Adam::from_config(model.store(), cfg);
        Self {
            model,
            adam,
            train: Vec::new(),
            infer: Vec::new(),
            bytes: 0,
        }
    }

    fn train_step(&mut self, batch: &Batch<S>, record: bool) -> Result<(), TrainError> {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let out = self
            .model
            .forward(&mut g, &batch.x, &mut ForwardCtx::train(0))?;
        let y = g.constant(batch.y.clone());
        let loss = mse_loss(&mut g, out.prediction, y)?;
        let grads = g.backward(loss)?;
        let store = self.model.store_mut();
        store.zero_grad();
        g.accumulate(&grads, store);
        self.adam.step(store);
        let dt = t0.elapsed().as_secs_f64();
        self.bytes = self.bytes.max(g.bytes());
        if record {
            self.train.push(dt);
        }
        Ok(())
    }

    fn infer_step(&mut self, batch: &Batch<S>, record: bool) -> Result<(), TrainError> {
        let t0 = Instant::now();
        let _ = self.model.predict(&batch.x)?;
        if record {
            self.infer.push(t0.elapsed().as_secs_f64());
        }
        Ok(())
    }
}

/// Times `reps` training steps and inference passes of both models on the
/// same batch and reports median seconds, the median paired ratio as the
/// relative overhead, and peak graph bytes. Repetitions are interleaved, alternating which arm goes first,
/// after one warm-up each.
pub fn measure_overhead<S: Scalar>(
    with: &Forecaster<S>,
    without: &Forecaster<S>,
    batch: &Batch<S>,
    cfg: &TrainConfig,
    reps: usize,
) -> Result<OverheadReport, TrainError> {
    if with.config().lookback != without.config().lookback
        || with.config().horizon != without.config().horizon
    {
        return Err(TrainError::Config(
            "overhead arms must share lookback and horizon".into(),
        ));
    }
    let reps = reps.max(1);
    let mut a = Arm::new(with, cfg);
    let mut b = Arm::new(without, cfg);
    for i in 0..=reps {
        let record = i > 0;
        let (first, second) = if i % 2 == 0 {
            (&mut a, &mut b)
        } else {
            (&mut b, &mut a)
        };
        first.train_step(batch, record)?;
        second.train_step(batch, record)?;
        first.infer_step(batch, record)?;
        second.infer_step(batch, record)?;
    }
    let train_overhead = paired_overhead(&a.train, &b.train);
    let infer_overhead = paired_overhead(&a.infer, &b.infer);
    let (tw, to) = (median(a.train), median(b.train));
    let (iw, io) = (median(a.infer), median(b.infer));
    Ok(OverheadReport {
        batch_size: batch.x.shape()[0],
        reps,
        train_seconds_with: tw,
        train_seconds_without: to,
        infer_seconds_with: iw,
        infer_seconds_without: io,
        graph_bytes_with: a.bytes,
        graph_bytes_without: b.bytes,
        params_with: with.param_count(),
        params_without: without.param_count(),
        train_overhead,
        infer_overhead,
        memory_overhead: a.bytes as f64 / b.bytes as f64 - 1.0,
    })
}
