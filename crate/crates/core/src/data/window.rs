use crate::autodiff::Tensor;
use crate::data::{DataError, SeriesFrame};
use crate::scalar::Scalar;

/// One supervised sample: `N x T` context and `N x L` target.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// channel-major `N x T`
    pub context: Vec<f64>,
    /// channel-major `N x L`
    pub target: Vec<f64>,
    pub origin: usize,
    pub channels: usize,
    /// per-channel (mean, population std) of the context
    pub stats: Vec<(f64, f64)>,
}

/// `len - T - L + 1` windows at stride 1 (strided: every `stride`-th origin).
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if len < lookback + horizon || stride == 0 {
        return 0;
    }
    (len - lookback - horizon) / stride + 1
}

/// Lazily materialized windows over one region.
#[derive(Debug, Clone)]
pub struct WindowSet<'a> {
    frame: &'a SeriesFrame,
    pub lookback: usize,
    pub horizon: usize,
    origins: Vec<usize>,
}

impl<'a> WindowSet<'a> {
    pub fn new(
        frame: &'a SeriesFrame,
        lookback: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Self, DataError> {
        if lookback == 0 || horizon == 0 || stride == 0 {
            return Err(DataError::EmptyWindow);
        }
        let needed = lookback + horizon;
        if frame.len() < needed {
            return Err(DataError::RegionTooShort {
                region: "window",
                len: frame.len(),
                needed,
            });
        }
        let count = window_count(frame.len(), lookback, horizon, stride);
        Ok(Self {
            frame,
            lookback,
            horizon,
            origins: (0..count).map(|i| i * stride).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.frame.n_channels()
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    /// Keeps every `keep_every`-th window (evaluation thinning).
    pub fn thinned(mut self, keep_every: usize) -> Self {
        let k = keep_every.max(1);
        self.origins = self.origins.into_iter().step_by(k).collect();
        self
    }

    pub fn get(&self, i: usize) -> WindowPair {
        let o = self.origins[i];
        let (t, l) = (self.lookback, self.horizon);
        let mut context = Vec::with_capacity(self.channels() * t);
        let mut target = Vec::with_capacity(self.channels() * l);
        let mut stats = Vec::with_capacity(self.channels());
        for c in self.frame.channels() {
            let ctx = &c[o..o + t];
            let mean = ctx.iter().sum::<f64>() / t as f64;
            let var = ctx.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
            stats.push((mean, var.sqrt()));
            context.extend_from_slice(ctx);
            target.extend_from_slice(&c[o + t..o + t + l]);
        }
        WindowPair {
            context,
            target,
            origin: self.frame.offset + o,
            channels: self.channels(),
            stats,
        }
    }

    /// Stacks the selected windows into `[B, N, T]` / `[B, N, L]` tensors.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Batch<S> {
        let (n, t, l) = (self.channels(), self.lookback, self.horizon);
        let mut x = Vec::with_capacity(indices.len() * n * t);
        let mut y = Vec::with_capacity(indices.len() * n * l);
        let mut origins = Vec::with_capacity(indices.len());
        for &i in indices {
            let o = self.origins[i];
            for c in self.frame.channels() {
                x.extend(c[o..o + t].iter().map(|&v| S::lit(v)));
                y.extend(c[o + t..o + t + l].iter().map(|&v| S::lit(v)));
            }
            origins.push(self.frame.offset + o);
        }
        let b = indices.len();
        Batch {
            x: Tensor::new(vec![b, n, t], x).expect("batch shape"),
            y: Tensor::new(vec![b, n, l], y).expect("batch shape"),
            origins,
        }
    }
}

/// Model-ready stack of windows.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub x: Tensor<S>,
    pub y: Tensor<S>,
    pub origins: Vec<usize>,
}

/// Materializes every window of `region`.
pub fn windows(
    region: &SeriesFrame,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>, DataError> {
    let set = WindowSet::new(region, lookback, horizon, stride)?;
    Ok((0..set.len()).map(|i| set.get(i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(len: usize) -> SeriesFrame {
        SeriesFrame::new(
            vec!["a".into(), "b".into()],
            vec![
                (0..len).map(|i| i as f64).collect(),
                (0..len).map(|i| -(i as f64)).collect(),
            ],
            "",
        )
        .unwrap()
    }

    #[test]
    fn count_and_origins() {
        let w = windows(&frame(10), 4, 2, 1).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(
            w.iter().map(|p| p.origin).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        assert_eq!(windows(&frame(6), 4, 2, 1).unwrap().len(), 1);
        let w = windows(&frame(10), 4, 2, 2).unwrap();
        assert_eq!(
            w.iter().map(|p| p.origin).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
    }

    #[test]
    fn window_contents_and_stats() {
        let w = windows(&frame(10), 4, 2, 1).unwrap();
        let p = &w[2];
        assert_eq!(p.context, vec![2.0, 3.0, 4.0, 5.0, -2.0, -3.0, -4.0, -5.0]);
        assert_eq!(p.target, vec![6.0, 7.0, -6.0, -7.0]);
        assert_eq!(p.stats[0].0, 3.5);
        assert!((p.stats[0].1 - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn too_short_region() {
        assert!(matches!(
            windows(&frame(5), 4, 2, 1),
            Err(DataError::RegionTooShort { .. })
        ));
    }

    #[test]
    fn batch_layout() {
        let f = frame(10);
        let set = WindowSet::new(&f, 4, 2, 1).unwrap();
        let b = set.batch::<f32>(&[1, 3]);
        assert_eq!(b.x.shape(), &[2, 2, 4]);
        assert_eq!(&b.x.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&b.y.data()[4..6], &[7.0, 8.0]);
        assert_eq!(&b.y.data()[2..4], &[-5.0, -6.0]);
        assert_eq!(b.origins, vec![1, 3]);
    }

    proptest! {
        #[test]
        fn count_matches_closed_form(extra in 0usize..200, t in 1usize..40, l in 1usize..20) {
            let len = t + l + extra;
            let w = windows(&frame(len), t, l, 1).unwrap();
            prop_assert_eq!(w.len(), len - t - l + 1);
            prop_assert!(w.iter().all(|p| p.origin + t + l <= len));
        }
    }
}
