//! Patch geometry, padding, adjacent patches and stride-1 candidates.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatchError {
    #[error("patch size {patch} exceeds context length {lookback}")]
    PatchTooLong { patch: usize, lookback: usize },
    #[error("stride {stride} exceeds patch size {patch}; patches would skip data")]
    StrideTooLong { stride: usize, patch: usize },
    #[error("patch size and stride must be at least 1")]
    Zero,
    #[error("context has {got} steps, geometry expects {expected}")]
    Length { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub lookback: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// number of adjacent patches, `ceil((T - p) / s) + 1`
    pub patches: usize,
    /// number of stride-1 candidates, `(n - 1) s + 1`
    pub candidates: usize,
    /// `p + (n - 1) s`
    pub padded_len: usize,
}

impl PatchGeometry {
    pub fn new(lookback: usize, patch_size: usize, stride: usize) -> Result<Self, PatchError> {
        if patch_size == 0 || stride == 0 {
            return Err(PatchError::Zero);
        }
        if patch_size > lookback {
            return Err(PatchError::PatchTooLong {
                patch: patch_size,
                lookback,
            });
        }
        if stride > patch_size {
            return Err(PatchError::StrideTooLong {
                stride,
                patch: patch_size,
            });
        }
        let patches = (lookback - patch_size).div_ceil(stride) + 1;
        Ok(Self {
            lookback,
            patch_size,
            stride,
            patches,
            candidates: (patches - 1) * stride + 1,
            padded_len: patch_size + (patches - 1) * stride,
        })
    }

    pub fn pad_len(&self) -> usize {
        self.padded_len - self.lookback
    }

    pub fn adjacent_starts(&self) -> Vec<usize> {
        (0..self.patches).map(|j| j * self.stride).collect()
    }

    pub fn candidate_starts(&self) -> Vec<usize> {
        (0..self.candidates).collect()
    }

    /// Flat index of `rows` padded contexts to the last observed step of each row,
    /// replicated over the padding.
    pub fn pad_index(&self, rows: usize) -> Vec<usize> {
        let mut index = Vec::with_capacity(rows * self.padded_len);
        for r in 0..rows {
            let base = r * self.lookback;
            index.extend((0..self.padded_len).map(|t| base + t.min(self.lookback - 1)));
        }
        index
    }

    /// Flat index into `[rows, padded_len]` gathering patches at `starts`.
    pub fn patch_index(&self, rows: usize, starts: &[usize]) -> Vec<usize> {
        let p = self.patch_size;
        let mut index = Vec::with_capacity(rows * starts.len() * p);
        for r in 0..rows {
            let base = r * self.padded_len;
            for &s in starts {
                index.extend(base + s..base + s + p);
            }
        }
        index
    }
}

pub fn geometry(
    lookback: usize,
    patch_size: usize,
    stride: usize,
) -> Result<PatchGeometry, PatchError> {
    PatchGeometry::new(lookback, patch_size, stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Adjacent,
    Candidate,
    Selected,
    Reassembled,
}

/// `[rows, count, p]` block of patches with their start offsets into the
/// padded context.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<S> {
    pub values: Tensor<S>,
    pub starts: Vec<usize>,
    pub kind: PatchKind,
}

/// Right-pads each row of `[rows, T]` to the padded length by repeating its
/// last value.
pub fn pad<S: Scalar>(x: &Tensor<S>, geom: &PatchGeometry) -> Result<Tensor<S>, PatchError> {
    let t = *x.shape().last().unwrap_or(&0);
    if t != geom.lookback {
        return Err(PatchError::Length {
            got: t,
            expected: geom.lookback,
        });
    }
    let rows = x.len() / t;
    let data = geom
        .pad_index(rows)
        .into_iter()
        .map(|i| x.data()[i])
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = geom.padded_len;
    Ok(Tensor::new(shape, data).expect("pad shape"))
}

fn patches_at<S: Scalar>(
    padded: &Tensor<S>,
    geom: &PatchGeometry,
    starts: Vec<usize>,
    kind: PatchKind,
) -> Result<PatchSet<S>, PatchError> {
    let len = *padded.shape().last().unwrap_or(&0);
    if len != geom.padded_len {
        return Err(PatchError::Length {
            got: len,
            expected: geom.padded_len,
        });
    }
    let rows = padded.len() / len;
    let data = geom
        .patch_index(rows, &starts)
        .into_iter()
        .map(|i| padded.data()[i])
        .collect();
    let values = Tensor::new(vec![rows, starts.len(), geom.patch_size], data).expect("patch shape");
    Ok(PatchSet {
        values,
        starts,
        kind,
    })
}

pub fn adjacent_patches<S: Scalar>(
    padded: &Tensor<S>,
    geom: &PatchGeometry,
) -> Result<PatchSet<S>, PatchError> {
    patches_at(padded, geom, geom.adjacent_starts(), PatchKind::Adjacent)
}

pub fn candidate_patches<S: Scalar>(
    padded: &Tensor<S>,
    geom: &PatchGeometry,
) -> Result<PatchSet<S>, PatchError> {
    patches_at(padded, geom, geom.candidate_starts(), PatchKind::Candidate)
}

/// Overlap-averaged placement of patches back onto the padded axis.
pub fn overlap_average<S: Scalar>(set: &PatchSet<S>, geom: &PatchGeometry) -> Tensor<S> {
    let shape = set.values.shape();
    let (rows, count, p) = (shape[0], shape[1], shape[2]);
    let mut sum = vec![S::zero(); rows * geom.padded_len];
    let mut hits = vec![0usize; geom.padded_len];
    for (j, &s) in set.starts.iter().enumerate() {
        for q in 0..p {
            hits[s + q] += 1;
            for r in 0..rows {
                sum[r * geom.padded_len + s + q] += set.values.data()[(r * count + j) * p + q];
            }
        }
    }
    for (i, v) in sum.iter_mut().enumerate() {
        let h = hits[i % geom.padded_len];
        if h > 0 {
            *v /= S::from_usize(h).expect("count");
        }
    }
    Tensor::new(vec![rows, geom.padded_len], sum).expect("shape")
}

/// `C(K + n - 1, n) * n!` ordered selections with repetition.
pub fn search_space_size(geom: &PatchGeometry) -> BigUint {
    let (k, n) = (geom.candidates as u64, geom.patches as u64);
    // C(K+n-1, n) * n! = (K+n-1)! / (K-1)! = K * (K+1) * ... * (K+n-1)
    (k..k + n).fold(BigUint::from(1u32), |acc, f| acc * BigUint::from(f))
}
