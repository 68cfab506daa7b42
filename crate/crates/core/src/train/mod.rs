//! Adam, early-stopped training, evaluation and overhead measurement.

mod overhead;

pub use overhead::{measure_overhead, OverheadReport};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, ParamStore};
use crate::data::WindowSet;
use crate::models::{mse_loss, Forecaster, ModelError};
use crate::nn::ForwardCtx;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split has no windows")]
    NoWindows(&'static str),
    #[error("a batch of {batch} windows needs {bytes} graph bytes, over the {budget} byte budget even at the minimum batch size")]
    OutOfMemory {
        batch: usize,
        bytes: usize,
        budget: usize,
    },
    #[error("training diverged in epoch {epoch}: non-finite loss (kept weights from the last finite checkpoint)")]
    Diverged {
        epoch: usize,
        record: Box<RunRecord>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// smallest batch the memory retry policy may fall back to
    pub min_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// cosine decay of the learning rate over `max_epochs`
    pub cosine: bool,
    /// graph size limit per batch that triggers batch halving
    pub memory_budget_bytes: Option<usize>,
    /// evaluate validation loss on every `val_stride`-th window
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            min_batch_size: 8,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine: false,
            memory_budget_bytes: None,
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let pow2 = |b: usize| b.is_power_of_two() && (8..=64).contains(&b);
        if !pow2(self.batch_size)
            || !pow2(self.min_batch_size)
            || self.min_batch_size > self.batch_size
        {
            return Err(TrainError::Config(format!(
                "batch sizes must be in {{8, 16, 32, 64}} with min <= initial, got {} / {}",
                self.batch_size, self.min_batch_size
            )));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.val_stride == 0 {
            return Err(TrainError::Config(
                "patience, max epochs and val stride must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(TrainError::Config(
                "lr must be positive and betas in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine {
            0.5 * self.lr
                * (1.0 + (std::f64::consts::PI * epoch as f64 / self.max_epochs as f64).cos())
        } else {
            self.lr
        }
    }
}

/// Bias-corrected Adam with per-parameter moments.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![S::zero(); store.value(id).len()])
                .collect()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn from_config(store: &ParamStore<S>, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, index: usize) -> (&[S], &[S]) {
        (&self.m[index], &self.v[index])
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(t));
        let c2 = S::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (S::lit(self.lr), S::lit(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.value_mut(id);
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                value[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.bump_step();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub optimizer_steps: u64,
    pub batch_size: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub peak_graph_bytes: usize,
    /// process high-water mark, when the platform reports it
    pub peak_rss_bytes: Option<u64>,
    pub wall_seconds: f64,
    pub test: Option<Metrics>,
}

impl RunRecord {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }
}

/// Mean squared and absolute error over every element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

/// Patience-based early stopping on a loss to minimize.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

fn params_finite<S: Scalar>(store: &ParamStore<S>) -> bool {
    store
        .iter()
        .all(|(_, _, t)| t.data().iter().all(|v| v.as_f64().is_finite()))
}

/// Peak resident set size of this process (`VmHWM`).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Forecast metrics over all windows of `set`, batch by batch, no window dropped.
pub fn evaluate<S: Scalar>(
    model: &Forecaster<S>,
    set: &WindowSet<'_>,
    batch_size: usize,
) -> Result<Metrics, TrainError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = set.batch::<S>(chunk);
        let (pred, _) = model.predict(&batch.x)?;
        for (p, y) in pred.data().iter().zip(batch.y.data()) {
            let d = p.as_f64() - y.as_f64();
            se += d * d;
            ae += d.abs();
        }
        count += pred.len();
    }
    let n = count.max(1) as f64;
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
        count,
    })
}

/// Graph bytes of one training step on the first `batch` windows.
fn probe_bytes<S: Scalar>(
    model: &Forecaster<S>,
    set: &WindowSet<'_>,
    batch: usize,
) -> Result<usize, TrainError> {
    let idx: Vec<usize> = (0..batch.min(set.len())).collect();
    let b = set.batch::<S>(&idx);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &b.x, &mut ForwardCtx::train(0))?;
    let y = g.constant(b.y);
    let loss = mse_loss(&mut g, out.prediction, y)?;
    let _ = g.backward(loss)?;
    Ok(g.bytes())
}

/// Halves the batch size until one step fits the memory budget.
pub fn fit_batch_size<S: Scalar>(
    model: &Forecaster<S>,
    set: &WindowSet<'_>,
    cfg: &TrainConfig,
) -> Result<usize, TrainError> {
    let Some(budget) = cfg.memory_budget_bytes else {
        return Ok(cfg.batch_size);
    };
    let mut batch = cfg.batch_size;
    loop {
        let bytes = probe_bytes(model, set, batch)?;
        if bytes <= budget {
            return Ok(batch);
        }
        if batch / 2 < cfg.min_batch_size {
            return Err(TrainError::OutOfMemory {
                batch,
                bytes,
                budget,
            });
        }
        batch /= 2;
    }
}

/// Trains with Adam on MSE, early-stopping on validation MSE, and restores
/// the best-validation weights.
pub fn train<S: Scalar>(
    model: &mut Forecaster<S>,
    train_set: &WindowSet<'_>,
    val_set: &WindowSet<'_>,
    cfg: &TrainConfig,
) -> Result<RunRecord, TrainError> {
    train_with_progress(model, train_set, val_set, cfg, &mut |_| {})
}

pub fn train_with_progress<S: Scalar>(
    model: &mut Forecaster<S>,
    train_set: &WindowSet<'_>,
    val_set: &WindowSet<'_>,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::NoWindows("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::NoWindows("validation"));
    }
    let val_set = val_set.clone().thinned(cfg.val_stride);
    let start = Instant::now();
    let batch_size = fit_batch_size(model, train_set, cfg)?;
    let mut adam = Adam::from_config(model.store(), cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = model.store().clone();
    let mut record = RunRecord {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stop: StopReason::MaxEpochs,
        optimizer_steps: 0,
        batch_size,
        train_windows: train_set.len(),
        val_windows: val_set.len(),
        peak_graph_bytes: 0,
        peak_rss_bytes: None,
        wall_seconds: 0.0,
        test: None,
    };
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        adam.lr = cfg.lr_at(epoch - 1);
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut weight) = (0.0, 0usize);
        let mut diverged = false;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch = train_set.batch::<S>(chunk);
            let mut g = Graph::new();
            let seed = cfg.seed ^ ((epoch as u64) << 32) ^ bi as u64;
            let out = model.forward(&mut g, &batch.x, &mut ForwardCtx::train(seed))?;
            let y = g.constant(batch.y);
            let loss = mse_loss(&mut g, out.prediction, y)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                diverged = true;
                break;
            }
            let grads = g.backward(loss)?;
            record.peak_graph_bytes = record.peak_graph_bytes.max(g.bytes());
            let store = model.store_mut();
            store.zero_grad();
            g.accumulate(&grads, store);
            adam.step(store);
            record.optimizer_steps += 1;
            total += lv * chunk.len() as f64;
            weight += chunk.len();
            if !params_finite(model.store()) {
                diverged = true;
                break;
            }
        }
        let val = if diverged {
            f64::NAN
        } else {
            evaluate(model, &val_set, batch_size.max(64))?.mse
        };
        let rec = EpochRecord {
            epoch,
            train_loss: if diverged {
                f64::NAN
            } else {
                total / weight.max(1) as f64
            },
            val_loss: val,
            lr: adam.lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        progress(&rec);
        record.epochs.push(rec);
        if diverged || !val.is_finite() {
            model.store_mut().copy_values_from(&best)?;
            record.stop = StopReason::Diverged;
            record.wall_seconds = start.elapsed().as_secs_f64();
            record.peak_rss_bytes = peak_rss_bytes();
            return Err(TrainError::Diverged {
                epoch,
                record: Box::new(record),
            });
        }
        match stopper.observe(epoch, val) {
            Verdict::Improved => {
                record.best_val_loss = val;
                record.best_epoch = epoch;
                best.copy_values_from(model.store())?;
            }
            Verdict::Continue => {}
            Verdict::Stop => {
                record.stop = StopReason::Patience;
                break;
            }
        }
    }
    model.store_mut().copy_values_from(&best)?;
    record.wall_seconds = start.elapsed().as_secs_f64();
    record.peak_rss_bytes = peak_rss_bytes();
    Ok(record)
}

#[cfg(test)]
mod tests;
