use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{SeriesFrame, SplitSpec};
use crate::scalar::Scalar;

/// Added to the context standard deviation before dividing.
pub const INSTANCE_EPS: f64 = 1e-5;
/// Lower bound on the train-region standard deviation used for z-scoring.
pub const STD_GUARD: f64 = 1e-8;

/// Per-channel train-region statistics used for global z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores every channel with statistics of the train region only.
pub fn standardize(frame: &SeriesFrame, spec: &SplitSpec) -> (SeriesFrame, ChannelStats) {
    let (train_end, _) = spec.boundaries(frame.len());
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    let out = frame.map_channels(|_, c| {
        let (mean, std) = mean_std(&c[..train_end.max(1).min(c.len())]);
        let std = std.max(STD_GUARD);
        means.push(mean);
        stds.push(std);
        c.iter().map(|v| (v - mean) / std).collect()
    });
    (
        out,
        ChannelStats {
            mean: means,
            std: stds,
        },
    )
}

/// Per-row statistics of an instance-normalized context.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

impl<S: Scalar> NormStats<S> {
    /// Divisor actually applied, `std + eps`.
    pub fn scale(&self) -> Vec<S> {
        self.std.iter().map(|&s| s + S::lit(INSTANCE_EPS)).collect()
    }
}

/// Normalizes each last-axis row of `x` to zero mean and (almost) unit
/// population standard deviation.
pub fn instance_normalize<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, NormStats<S>) {
    let t = (*x.shape().last().unwrap_or(&1)).max(1);
    let n = S::from_usize(t).expect("len");
    let mut data = x.data().to_vec();
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    for row in data.chunks_mut(t) {
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let std = var.sqrt();
        let div = std + S::lit(INSTANCE_EPS);
        row.iter_mut().for_each(|v| *v = (*v - mean) / div);
        means.push(mean);
        stds.push(std);
    }
    (
        Tensor::new(x.shape().to_vec(), data).expect("same shape"),
        NormStats {
            mean: means,
            std: stds,
        },
    )
}

/// Inverse of [`instance_normalize`] applied row-wise to predictions.
pub fn denormalize<S: Scalar>(y: &Tensor<S>, stats: &NormStats<S>) -> Tensor<S> {
    let rows = stats.mean.len().max(1);
    let width = y.len() / rows;
    let scale = stats.scale();
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * scale[i / width] + stats.mean[i / width])
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}
