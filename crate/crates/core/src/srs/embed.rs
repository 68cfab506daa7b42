use crate::autodiff::{Graph, GraphError, Tensor, Var};
use crate::scalar::Scalar;

/// `alpha * conventional + (1 - alpha) * selective` with `alpha` broadcast
/// over leading axes, computed as `selective + alpha * (conventional - selective)`.
pub fn adaptive_fusion<S: Scalar>(
    g: &mut Graph<S>,
    conventional: Var,
    selective: Var,
    alpha: Var,
) -> Result<Var, GraphError> {
    if g.shape(conventional) != g.shape(selective) {
        return Err(GraphError::ShapeMismatch {
            op: "adaptive_fusion",
            detail: format!("{:?} vs {:?}", g.shape(conventional), g.shape(selective)),
        });
    }
    let diff = g.sub(conventional, selective)?;
    let weighted = g.mul(diff, alpha)?;
    g.add(selective, weighted)
}

/// Sinusoidal table `[positions, d]`: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching cosine. With odd `d` the unpaired last column is zero.
pub fn sinusoidal_table<S: Scalar>(positions: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); positions * d];
    for pos in 0..positions {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = S::lit(angle.sin());
            data[pos * d + 2 * i + 1] = S::lit(angle.cos());
        }
    }
    Tensor::new(vec![positions, d], data).expect("table shape")
}

/// Adds the slot-position table to `[.., n, d]` embeddings.
pub fn position_embed<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var, GraphError> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(GraphError::ShapeMismatch {
            op: "position_embed",
            detail: format!("{shape:?}"),
        });
    }
    let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let table = g.constant(sinusoidal_table(n, d));
    g.add(x, table)
}
