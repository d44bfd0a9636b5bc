//! Central finite differences, the independent oracle for `backward`.

use super::graph::GraphError;
use super::tensor::Tensor;

/// Central-difference gradient estimate `(f(p+h) - f(p-h)) / 2h` per
/// coordinate of every tensor in `params`.
///
/// `f` must be deterministic. A non-finite function value at a perturbed
/// point is an error.
pub fn finite_diff_grad<F>(
    mut f: F,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>, GraphError>
where
    F: FnMut(&[Tensor]) -> Result<f64, GraphError>,
{
    if !(h > 0.0) {
        return Err(GraphError::Invalid {
            op: "finite_diff",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = f(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = f(&work)?;
            work[p].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(GraphError::NonFinite { op: "finite_diff" });
            }
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}
