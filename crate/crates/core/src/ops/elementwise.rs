//! Element-wise algebra and activations with their adjoints.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

fn same(a: &Tensor3, b: &Tensor3, op: &'static str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

pub fn add(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    same(a, b, "add")?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

pub fn mul(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    same(a, b, "mul")?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    Ok(out)
}

/// Cotangents of `a * b` for `a` and `b`.
pub fn mul_backward(a: &Tensor3, b: &Tensor3, grad: &Tensor3) -> Result<(Tensor3, Tensor3)> {
    same(a, b, "mul_backward")?;
    same(a, grad, "mul_backward")?;
    Ok((mul(grad, b)?, mul(grad, a)?))
}

/// Adds a `1x1xC` vector to every location of `field`.
pub fn broadcast_add(field: &Tensor3, vector: &Tensor3) -> Result<Tensor3> {
    if vector.h() != 1 || vector.w() != 1 || vector.c() != field.c() {
        return Err(Error::ShapeMismatch {
            op: "broadcast_add",
            left: field.shape(),
            right: vector.shape(),
        });
    }
    let v = vector.data();
    let mut out = field.clone();
    for chunk in out.data_mut().chunks_mut(field.c()) {
        for (o, &b) in chunk.iter_mut().zip(v) {
            *o += b;
        }
    }
    Ok(out)
}

/// Returns `(grad_field, grad_vector)`; the vector cotangent sums over all locations.
pub fn broadcast_add_backward(grad: &Tensor3) -> (Tensor3, Tensor3) {
    let mut gv = Tensor3::zeros(1, 1, grad.c());
    for chunk in grad.data().chunks(grad.c()) {
        for (o, &g) in gv.data_mut().iter_mut().zip(chunk) {
            *o += g;
        }
    }
    (grad.clone(), gv)
}

pub fn relu(t: &Tensor3) -> Tensor3 {
    t.map(|v| v.max(0.0))
}

pub fn relu_backward(pre: &Tensor3, grad: &Tensor3) -> Tensor3 {
    let mut out = grad.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *o = 0.0;
        }
    }
    out
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_sums_vector_cotangent() {
        let f = Tensor3::zeros(2, 3, 2);
        let v = Tensor3::from_vec(1, 1, 2, vec![1.0, -2.0]).unwrap();
        let out = broadcast_add(&f, &v).unwrap();
        assert!(out.data().chunks(2).all(|c| c == [1.0, -2.0]));
        let (_, gv) = broadcast_add_backward(&Tensor3::filled(2, 3, 2, 0.5));
        assert_eq!(gv.data(), &[3.0, 3.0]);
        assert!(broadcast_add(&f, &Tensor3::zeros(1, 1, 3)).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
