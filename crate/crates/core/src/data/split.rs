use serde::{Deserialize, Serialize};

use crate::data::{DataError, SeriesFrame};

/// Chronological train/validation/test ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    ratios: [f64; 3],
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3]) -> Result<Self, DataError> {
        let total: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(DataError::BadRatios(ratios));
        }
        Ok(Self { ratios })
    }

    /// Parses `6:2:2` style ratios (normalized by their sum).
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let parts: Vec<f64> = text
            .split([':', ',', '/'])
            .map(|p| p.trim().parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        if parts.len() != 3 {
            return Err(DataError::BadRatios([f64::NAN; 3]));
        }
        let total: f64 = parts.iter().sum();
        if !(total > 0.0) {
            return Err(DataError::BadRatios([parts[0], parts[1], parts[2]]));
        }
        Self::new([parts[0] / total, parts[1] / total, parts[2] / total])
    }

    pub fn ratios(&self) -> [f64; 3] {
        self.ratios
    }

    /// `(train_end, val_end)` as cumulative floors of ratio times length.
    pub fn boundaries(&self, len: usize) -> (usize, usize) {
        // tolerance absorbs products such as 0.6 * 14400 landing just below an integer
        let cut = |r: f64| ((r * len as f64) + 1e-7).floor() as usize;
        let train_end = cut(self.ratios[0]).min(len);
        let val_end = cut(self.ratios[0] + self.ratios[1]).clamp(train_end, len);
        (train_end, val_end)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.6, 0.2, 0.2],
        }
    }
}

/// Contiguous train/validation/test regions; each must fit `min_len` steps.
pub fn split(
    frame: &SeriesFrame,
    spec: &SplitSpec,
    min_len: usize,
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame), DataError> {
    let len = frame.len();
    let (a, b) = spec.boundaries(len);
    for (region, l) in [("train", a), ("validation", b - a), ("test", len - b)] {
        if l < min_len {
            return Err(DataError::RegionTooShort {
                region,
                len: l,
                needed: min_len,
            });
        }
    }
    Ok((frame.slice(0, a), frame.slice(a, b), frame.slice(b, len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(len: usize) -> SeriesFrame {
        SeriesFrame::new(
            vec!["x".into()],
            vec![(0..len).map(|i| i as f64).collect()],
            "1h",
        )
        .unwrap()
    }

    #[test]
    fn boundaries_by_floor() {
        let spec = SplitSpec::new([0.6, 0.2, 0.2]).unwrap();
        assert_eq!(spec.boundaries(100), (60, 80));
        let (tr, va, te) = split(&frame(14400), &spec, 192).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8640, 2880, 2880));
        assert_eq!((va.offset, te.offset), (8640, 11520));
        let spec = SplitSpec::parse("7:1:2").unwrap();
        assert_eq!(spec.boundaries(1000), (700, 800));
    }

    #[test]
    fn regions_are_chronological_and_exhaustive() {
        let (tr, va, te) = split(&frame(100), &SplitSpec::default(), 5).unwrap();
        let joined: Vec<f64> = [tr.channel(0), va.channel(0), te.channel(0)].concat();
        assert_eq!(joined, frame(100).channel(0));
    }

    #[test]
    fn degenerate_ratios_error_when_windows_needed() {
        let spec = SplitSpec::new([1.0, 0.0, 0.0]).unwrap();
        let err = split(&frame(100), &spec, 10).unwrap_err();
        assert!(matches!(
            err,
            DataError::RegionTooShort {
                region: "validation",
                ..
            }
        ));
    }

    #[test]
    fn bad_ratios() {
        assert!(SplitSpec::new([0.5, 0.5, 0.5]).is_err());
        assert!(SplitSpec::new([-0.2, 0.6, 0.6]).is_err());
        assert!(SplitSpec::parse("6:2").is_err());
    }
}
