//! Hard argmax/argsort decisions and the score passthrough that routes
//! gradients back into the scorers.

use crate::autodiff::{Graph, GraphError, Var};
use crate::scalar::Scalar;

/// For every row and slot, the item with the largest score.
///
/// `scores` is laid out `[rows, items, slots]`; ties resolve to the lowest
/// item index and NaN never wins.
pub fn argmax_slots<S: Scalar>(
    scores: &[S],
    rows: usize,
    items: usize,
    slots: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * slots);
    for r in 0..rows {
        let block = &scores[r * items * slots..(r + 1) * items * slots];
        for j in 0..slots {
            let mut best = 0;
            let mut best_val = S::neg_infinity();
            for k in 0..items {
                let v = block[k * slots + j];
                if v > best_val {
                    best = k;
                    best_val = v;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Row-wise ascending stable argsort of `[rows, items]`.
pub fn argsort_rows<S: Scalar>(scores: &[S], rows: usize, items: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * items);
    for r in 0..rows {
        let row = &scores[r * items..(r + 1) * items];
        let mut order: Vec<usize> = (0..items).collect();
        order.sort_by(|&a, &b| {
            row[a]
                .partial_cmp(&row[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        out.extend(order);
    }
    out
}

/// Gathers `indices` from `values` and multiplies each picked item by
/// `score * detach(1 / score)`.
///
/// `values` is `[rows, items, width]`; `indices` holds `slots` entries per
/// row. `scores` is either `[rows, items]` (one score per item) or
/// `[rows, items, slots]` (slot `j` reads column `j`). The forward payload is
/// the plain gather scaled by a factor that rounds to one; the backward pass
/// hands each used score `<upstream, value> / score`.
pub fn passthrough_select<S: Scalar>(
    g: &mut Graph<S>,
    values: Var,
    scores: Var,
    indices: &[usize],
) -> Result<Var, GraphError> {
    let vshape = g.shape(values).to_vec();
    if vshape.len() != 3 {
        return Err(GraphError::ShapeMismatch {
            op: "passthrough_select",
            detail: format!("values {vshape:?}"),
        });
    }
    let (rows, items, width) = (vshape[0], vshape[1], vshape[2]);
    if rows == 0 || !indices.len().is_multiple_of(rows) {
        return Err(GraphError::ShapeMismatch {
            op: "passthrough_select",
            detail: format!("{} indices for {rows} rows", indices.len()),
        });
    }
    let slots = indices.len() / rows;
    let sshape = g.shape(scores).to_vec();
    let per_slot = match sshape.as_slice() {
        [r, m] if *r == rows && *m == items => false,
        [r, m, k] if *r == rows && *m == items && *k == slots => true,
        _ => {
            return Err(GraphError::ShapeMismatch {
                op: "passthrough_select",
                detail: format!("scores {sshape:?} for values {vshape:?} and {slots} slots"),
            })
        }
    };
    let mut score_index = Vec::with_capacity(indices.len());
    let mut value_index = Vec::with_capacity(indices.len() * width);
    for r in 0..rows {
        for j in 0..slots {
            let item = indices[r * slots + j];
            if item >= items {
                return Err(GraphError::IndexOutOfBounds {
                    axis: 1,
                    index: item,
                    len: items,
                });
            }
            score_index.push(if per_slot {
                (r * items + item) * slots + j
            } else {
                r * items + item
            });
            let base = (r * items + item) * width;
            value_index.extend(base..base + width);
        }
    }
    {
        let sv = g.value(scores).data();
        if let Some(&bad) = score_index.iter().find(|&&i| sv[i] <= S::zero()) {
            return Err(GraphError::Invalid(format!(
                "passthrough needs positive scores, got {}",
                sv[bad]
            )));
        }
    }
    let picked_scores = g.take(scores, score_index, vec![rows, slots])?;
    let inv = g.recip(picked_scores);
    let inv = g.detach(inv);
    let ones = g.mul(picked_scores, inv)?;
    let picked = g.take(values, value_index, vec![rows, slots, width])?;
    // picked * ones, written as picked + picked * (ones - detach(ones)) so the
    // payload is the exact gather while the score gradient is unchanged
    let frozen = g.detach(ones);
    let zero = g.sub(ones, frozen)?;
    let delta = g.mul_prefix(picked, zero)?;
    g.add(picked, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn argmax_ties_go_low() {
        let scores = [1.0f32, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(argmax_slots(&scores, 1, 3, 2), vec![0, 0]);
        // items x slots = 3 x 2: slot 0 column [1, 5, 5], slot 1 column [2, 0, 9]
        let scores = [1.0f64, 2.0, 5.0, 0.0, 5.0, 9.0];
        assert_eq!(argmax_slots(&scores, 1, 3, 2), vec![1, 2]);
        assert_eq!(argmax_slots(&[f32::NAN, 0.5], 1, 2, 1), vec![1]);
    }

    #[test]
    fn argsort_ascending_stable() {
        assert_eq!(argsort_rows(&[3.0f64, 1.0, 2.0], 1, 3), vec![1, 2, 0]);
        assert_eq!(
            argsort_rows(&[1.0f32, 1.0, 1.0, 2.0, 2.0, 0.0], 2, 3),
            vec![0, 1, 2, 2, 0, 1]
        );
    }

    #[test]
    fn scalar_example_forward_and_backward() {
        let mut g = Graph::<f64>::new();
        let values = g.input(Tensor::new(vec![1, 3, 1], vec![10.0, 20.0, 30.0]).unwrap());
        let scores = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let out = passthrough_select(&mut g, values, scores, &[2]).unwrap();
        assert_eq!(g.value(out).data(), &[30.0]);
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        let gs = grads.wrt(scores).unwrap();
        assert!((gs[2] - 10.0).abs() < 1e-12);
        assert_eq!(gs[0], 0.0);
        assert_eq!(gs[1], 0.0);
        assert_eq!(grads.wrt(values).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn single_precision_forward_is_exact_here() {
        let mut g = Graph::<f32>::new();
        let values = g.input(Tensor::new(vec![1, 3, 1], vec![10.0, 20.0, 30.0]).unwrap());
        let scores = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let out = passthrough_select(&mut g, values, scores, &[2]).unwrap();
        assert_eq!(g.value(out).data(), &[30.0]);
    }

    #[test]
    fn rejects_non_positive_scores() {
        let mut g = Graph::<f32>::new();
        let values = g.input(Tensor::zeros(vec![1, 2, 1]));
        let scores = g.input(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        assert!(passthrough_select(&mut g, values, scores, &[0]).is_err());
        assert!(passthrough_select(&mut g, values, scores, &[1]).is_ok());
        assert!(passthrough_select(&mut g, values, scores, &[2]).is_err());
    }
}
