use crate::autodiff::{GraphError, Tensor};
use crate::scalar::Scalar;

/// Central-difference gradient estimate of a scalar function at `x`.
///
/// Coordinate `i` is `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`, evaluated
/// in `f64` regardless of the tensor's scalar type.
pub fn finite_diff_grad<S, F>(mut f: F, x: &Tensor<S>, eps: f64) -> Result<Vec<f64>, GraphError>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> f64,
{
    if !(eps > 0.0) {
        return Err(GraphError::Invalid(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = S::lit(orig.as_f64() + eps);
        let up = f(&probe);
        probe.data_mut()[i] = S::lit(orig.as_f64() - eps);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        for v in [up, down] {
            if !v.is_finite() {
                return Err(GraphError::NonFinite(v));
            }
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}
