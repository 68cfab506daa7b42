use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Test-split forecast errors of one run, in the standardized data space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub lookback: usize,
    pub horizon: usize,
    pub seed: u64,
    pub ablation: String,
    pub mse: f64,
    pub mae: f64,
    /// number of windows evaluated (none dropped)
    pub windows: usize,
    /// number of scalar errors averaged
    pub count: usize,
    /// errors at each forecast step, averaged over windows and channels
    pub per_step: Vec<StepMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Running sums of squared and absolute error, overall and per position
/// along the last axis.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    se: f64,
    ae: f64,
    count: usize,
    step_se: Vec<f64>,
    step_ae: Vec<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<S: Scalar>(
        &mut self,
        prediction: &Tensor<S>,
        target: &Tensor<S>,
    ) -> Result<(), EvalError> {
        if prediction.shape() != target.shape() {
            return Err(EvalError::Misaligned {
                prediction: prediction.shape().to_vec(),
                target: target.shape().to_vec(),
            });
        }
        let width = prediction.shape().last().copied().unwrap_or(1).max(1);
        if self.step_se.is_empty() {
            self.step_se = vec![0.0; width];
            self.step_ae = vec![0.0; width];
        } else if self.step_se.len() != width {
            return Err(EvalError::Misaligned {
                prediction: prediction.shape().to_vec(),
                target: vec![self.step_se.len()],
            });
        }
        for (i, (p, y)) in prediction.data().iter().zip(target.data()).enumerate() {
            let d = p.as_f64() - y.as_f64();
            self.se += d * d;
            self.ae += d.abs();
            self.step_se[i % width] += d * d;
            self.step_ae[i % width] += d.abs();
        }
        self.count += prediction.len();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `(mse, mae)`; zero when nothing was added.
    pub fn finish(&self) -> (f64, f64) {
        if self.count == 0 {
            return (0.0, 0.0);
        }
        let n = self.count as f64;
        (self.se / n, self.ae / n)
    }

    pub fn per_step(&self) -> Vec<StepMetrics> {
        let rows = (self.count / self.step_se.len().max(1)).max(1) as f64;
        (0..self.step_se.len())
            .map(|step| StepMetrics {
                step,
                mse: self.step_se[step] / rows,
                mae: self.step_ae[step] / rows,
            })
            .collect()
    }
}

/// `(mse, mae)` over every element of two aligned prediction/target sets.
pub fn metrics<S: Scalar>(
    prediction: &Tensor<S>,
    target: &Tensor<S>,
) -> Result<(f64, f64), EvalError> {
    let mut acc = MetricAccumulator::new();
    acc.add(prediction, target)?;
    Ok(acc.finish())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
