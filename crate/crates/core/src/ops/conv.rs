//! 2-D convolution over `(y, x, c)` tensors and its adjoint.
//!
//! Accumulation order is fixed (bias, then `ky`, `kx`, then input channel) so
//! repeated calls produce bit-identical output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{KernelBank, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    /// Zero padding; when the total pad is odd the extra row/column goes to the bottom/right.
    Same,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
}

fn geometry(input: &Tensor3, bank: &KernelBank, padding: Padding, stride: usize) -> Result<Geometry> {
    if bank.in_channels != input.c() {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input.shape(),
            right: crate::error::Shape3 {
                h: bank.kh,
                w: bank.kw,
                c: bank.in_channels,
            },
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let (h, w) = (input.h(), input.w());
    match padding {
        Padding::Valid => {
            if bank.kh > h || bank.kw > w {
                return Err(Error::invalid(
                    "conv2d",
                    format!("{}x{} kernel larger than {} input", bank.kh, bank.kw, input.shape()),
                ));
            }
            Ok(Geometry {
                out_h: (h - bank.kh) / stride + 1,
                out_w: (w - bank.kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
                stride,
            })
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + bank.kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + bank.kw).saturating_sub(w);
            Ok(Geometry {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
                stride,
            })
        }
    }
}

/// Weights rearranged to `[ky][kx][o][i]` so the inner loop is a contiguous dot product.
fn transpose_weights(bank: &KernelBank) -> Vec<f64> {
    let (o_n, i_n, kh, kw) = (bank.out_channels, bank.in_channels, bank.kh, bank.kw);
    let mut out = vec![0.0; bank.weights.len()];
    for o in 0..o_n {
        for i in 0..i_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    out[((ky * kw + kx) * o_n + o) * i_n + i] = bank.weight(o, i, ky, kx);
                }
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn source_index(o: usize, k: usize, pad: usize, stride: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    if pos < 0 || pos as usize >= extent {
        None
    } else {
        Some(pos as usize)
    }
}

/// Stride-1 convolution (cross-correlation convention, as in every deep learning library).
pub fn conv2d(input: &Tensor3, bank: &KernelBank, padding: Padding) -> Result<Tensor3> {
    conv2d_strided(input, bank, padding, 1)
}

pub fn conv2d_strided(input: &Tensor3, bank: &KernelBank, padding: Padding, stride: usize) -> Result<Tensor3> {
    let g = geometry(input, bank, padding, stride)?;
    let wt = transpose_weights(bank);
    let (o_n, i_n, kh, kw) = (bank.out_channels, bank.in_channels, bank.kh, bank.kw);
    let mut out = Tensor3::zeros(g.out_h, g.out_w, o_n);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let acc = out.pixel_mut(oy, ox);
            acc.copy_from_slice(&bank.bias);
            for ky in 0..kh {
                let Some(iy) = source_index(oy, ky, g.pad_top, g.stride, input.h()) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = source_index(ox, kx, g.pad_left, g.stride, input.w()) else {
                        continue;
                    };
                    let px = input.pixel(iy, ix);
                    let base = (ky * kw + kx) * o_n * i_n;
                    for (o, a) in acc.iter_mut().enumerate() {
                        *a += dot(&wt[base + o * i_n..base + (o + 1) * i_n], px);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d_strided`]: returns the input cotangent and the
/// weight/bias cotangents packed in a bank of the same shape.
pub fn conv2d_backward(
    input: &Tensor3,
    bank: &KernelBank,
    padding: Padding,
    stride: usize,
    grad_out: &Tensor3,
) -> Result<(Tensor3, KernelBank)> {
    let g = geometry(input, bank, padding, stride)?;
    let (o_n, i_n, kh, kw) = (bank.out_channels, bank.in_channels, bank.kh, bank.kw);
    if grad_out.h() != g.out_h || grad_out.w() != g.out_w || grad_out.c() != o_n {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: grad_out.shape(),
            right: crate::error::Shape3 {
                h: g.out_h,
                w: g.out_w,
                c: o_n,
            },
        });
    }
    let wt = transpose_weights(bank);
    let mut gwt = vec![0.0; wt.len()];
    let mut gin = Tensor3::zeros(input.h(), input.w(), i_n);
    let mut gbank = bank.zeros_like();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let go = grad_out.pixel(oy, ox);
            for (b, &v) in gbank.bias.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..kh {
                let Some(iy) = source_index(oy, ky, g.pad_top, g.stride, input.h()) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = source_index(ox, kx, g.pad_left, g.stride, input.w()) else {
                        continue;
                    };
                    let base = (ky * kw + kx) * o_n * i_n;
                    let px = input.pixel(iy, ix);
                    for (o, &gv) in go.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let row = base + o * i_n;
                        for (gw, &x) in gwt[row..row + i_n].iter_mut().zip(px) {
                            *gw += gv * x;
                        }
                    }
                    let gpx = gin.pixel_mut(iy, ix);
                    for (o, &gv) in go.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let row = base + o * i_n;
                        for (gi, &w) in gpx.iter_mut().zip(&wt[row..row + i_n]) {
                            *gi += gv * w;
                        }
                    }
                }
            }
        }
    }
    for o in 0..o_n {
        for i in 0..i_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let idx = gbank.weight_index(o, i, ky, kx);
                    gbank.weights[idx] = gwt[((ky * kw + kx) * o_n + o) * i_n + i];
                }
            }
        }
    }
    Ok((gin, gbank))
}
