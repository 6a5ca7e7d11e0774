use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Maps a non-negative map onto the probability simplex with a floor:
/// `(v / sum(v) + eps) / (1 + eps * N)` after clamping at zero. A map with no
/// positive mass becomes uniform.
pub fn normalize_distribution(map: &Tensor2, eps: f64) -> Tensor2 {
    let n = map.len() as f64;
    let sum: f64 = map.data().iter().map(|v| v.max(0.0)).sum();
    if sum <= 0.0 {
        return Tensor2::filled(map.h(), map.w(), 1.0 / n);
    }
    let denom = 1.0 + eps * n;
    map.map(|v| (v.max(0.0) / sum + eps) / denom)
}

/// Cotangent of [`normalize_distribution`] with respect to its input.
pub fn normalize_distribution_backward(map: &Tensor2, eps: f64, grad: &Tensor2) -> Result<Tensor2> {
    if !map.same_shape(grad) {
        return Err(Error::ShapeMismatch {
            op: "normalize_distribution_backward",
            left: map.shape(),
            right: grad.shape(),
        });
    }
    let n = map.len() as f64;
    let sum: f64 = map.data().iter().map(|v| v.max(0.0)).sum();
    if sum <= 0.0 {
        return Ok(Tensor2::zeros(map.h(), map.w()));
    }
    let denom = 1.0 + eps * n;
    let weighted: f64 = map
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| v.max(0.0) * g)
        .sum();
    let shared = weighted / (sum * sum);
    map.zip_map(grad, |v, g| if v < 0.0 { 0.0 } else { (g / sum - shared) / denom })
}
