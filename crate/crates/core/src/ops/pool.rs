//! Stride-1, valid-extent max and average pooling.

use crate::error::{Error, Result, Shape3};
use crate::tensor::Tensor3;

fn check_window(input: &Tensor3, kh: usize, kw: usize, op: &'static str) -> Result<(usize, usize)> {
    if kh == 0 || kw == 0 {
        return Err(Error::invalid(op, "pool kernel must be positive"));
    }
    if kh > input.h() || kw > input.w() {
        return Err(Error::invalid(
            op,
            format!("{kh}x{kw} window larger than {} input", input.shape()),
        ));
    }
    Ok((input.h() - kh + 1, input.w() - kw + 1))
}

/// Per-channel window maximum together with the flat input index that won
/// each output element (first occurrence in scan order on ties).
pub fn max_pool_with_indices(input: &Tensor3, kh: usize, kw: usize) -> Result<(Tensor3, Vec<usize>)> {
    let (oh, ow) = check_window(input, kh, kw, "max_pool")?;
    let c = input.c();
    let mut out = Tensor3::zeros(oh, ow, c);
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_i = input.index(oy, ox, ch);
                let mut best = input.data()[best_i];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = input.index(oy + ky, ox + kx, ch);
                        let v = input.data()[i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                let o = out.index(oy, ox, ch);
                out.data_mut()[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool(input: &Tensor3, kh: usize, kw: usize) -> Result<Tensor3> {
    max_pool_with_indices(input, kh, kw).map(|(t, _)| t)
}

/// Routes each output cotangent to the input element that produced the maximum.
pub fn max_pool_backward(input_shape: Shape3, argmax: &[usize], grad_out: &Tensor3) -> Result<Tensor3> {
    if argmax.len() != grad_out.data().len() {
        return Err(Error::invalid("max_pool_backward", "index buffer does not match gradient"));
    }
    let mut gin = Tensor3::zeros(input_shape.h, input_shape.w, input_shape.c);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gin.data_mut()[i] += g;
    }
    Ok(gin)
}

pub fn avg_pool(input: &Tensor3, kh: usize, kw: usize) -> Result<Tensor3> {
    let (oh, ow) = check_window(input, kh, kw, "avg_pool")?;
    let c = input.c();
    let inv = 1.0 / (kh * kw) as f64;
    let mut out = Tensor3::zeros(oh, ow, c);
    let mut acc = vec![0.0; c];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ky in 0..kh {
                for kx in 0..kw {
                    for (a, &v) in acc.iter_mut().zip(input.pixel(oy + ky, ox + kx)) {
                        *a += v;
                    }
                }
            }
            for (o, &a) in out.pixel_mut(oy, ox).iter_mut().zip(&acc) {
                *o = a * inv;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input_shape: Shape3, kh: usize, kw: usize, grad_out: &Tensor3) -> Result<Tensor3> {
    if grad_out.h() + kh - 1 != input_shape.h || grad_out.w() + kw - 1 != input_shape.w || grad_out.c() != input_shape.c {
        return Err(Error::ShapeMismatch {
            op: "avg_pool_backward",
            left: grad_out.shape(),
            right: input_shape,
        });
    }
    let inv = 1.0 / (kh * kw) as f64;
    let mut gin = Tensor3::zeros(input_shape.h, input_shape.w, input_shape.c);
    for oy in 0..grad_out.h() {
        for ox in 0..grad_out.w() {
            let g = grad_out.pixel(oy, ox);
            for ky in 0..kh {
                for kx in 0..kw {
                    for (gi, &gv) in gin.pixel_mut(oy + ky, ox + kx).iter_mut().zip(g) {
                        *gi += gv * inv;
                    }
                }
            }
        }
    }
    Ok(gin)
}
