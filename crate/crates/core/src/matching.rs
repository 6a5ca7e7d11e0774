//! Spatial matching between a template feature `z` and a search feature `x`.
//!
//! * [`dw_xcorr`]: per-channel valid cross correlation.
//! * [`ch_trans`]: 3x3 conv, window max/avg pooling with the template's
//!   extent, and a shared bottleneck (two 1x1 convs with a rectifier) applied
//!   to both pooled maps and summed.
//! * [`channel_weights`]: broadcast sum of the template descriptor onto every
//!   search-window descriptor followed by a 1x1 conv, one weight vector per
//!   response location.
//! * [`svc_corr`]: the channel-weight field added to the correlation stack.

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::tensor::{KernelBank, Tensor3};

fn check_pair(z: &Tensor3, x: &Tensor3, op: &'static str) -> Result<()> {
    if z.c() != x.c() || z.h() > x.h() || z.w() > x.w() {
        return Err(Error::ShapeMismatch {
            op,
            left: z.shape(),
            right: x.shape(),
        });
    }
    Ok(())
}

/// Depth-wise correlation on raw `(y, x, c)` buffers, generic over precision.
/// `out` must hold `(hx - hz + 1) * (wx - wz + 1) * c` elements.
pub fn dw_xcorr_kernel<T: Float>(z: &[T], hz: usize, wz: usize, x: &[T], hx: usize, wx: usize, c: usize, out: &mut [T]) {
    let (oh, ow) = (hx - hz + 1, wx - wz + 1);
    debug_assert_eq!(out.len(), oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * c;
            let acc = &mut out[o..o + c];
            acc.iter_mut().for_each(|a| *a = T::zero());
            for dy in 0..hz {
                for dx in 0..wz {
                    let zi = (dy * wz + dx) * c;
                    let xi = ((oy + dy) * wx + ox + dx) * c;
                    let zp = &z[zi..zi + c];
                    let xp = &x[xi..xi + c];
                    for ch in 0..c {
                        acc[ch] = acc[ch] + zp[ch] * xp[ch];
                    }
                }
            }
        }
    }
}

/// `out[y][x][c] = sum_{dy,dx} z[dy][dx][c] * x[y+dy][x+dx][c]`.
pub fn dw_xcorr(z: &Tensor3, x: &Tensor3) -> Result<Tensor3> {
    check_pair(z, x, "dw_xcorr")?;
    let (oh, ow, c) = (x.h() - z.h() + 1, x.w() - z.w() + 1, z.c());
    let mut out = vec![0.0; oh * ow * c];
    dw_xcorr_kernel(z.data(), z.h(), z.w(), x.data(), x.h(), x.w(), c, &mut out);
    Tensor3::from_vec(oh, ow, c, out)
}

/// Single-precision evaluation of [`dw_xcorr`], widened back to `f64`.
pub fn dw_xcorr_f32(z: &Tensor3, x: &Tensor3) -> Result<Tensor3> {
    check_pair(z, x, "dw_xcorr_f32")?;
    let (oh, ow, c) = (x.h() - z.h() + 1, x.w() - z.w() + 1, z.c());
    let zf: Vec<f32> = z.data().iter().map(|&v| v as f32).collect();
    let xf: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
    let mut out = vec![0f32; oh * ow * c];
    dw_xcorr_kernel(&zf, z.h(), z.w(), &xf, x.h(), x.w(), c, &mut out);
    Tensor3::from_vec(oh, ow, c, out.into_iter().map(f64::from).collect())
}

/// Returns `(grad_z, grad_x)`.
pub fn dw_xcorr_backward(z: &Tensor3, x: &Tensor3, grad: &Tensor3) -> Result<(Tensor3, Tensor3)> {
    check_pair(z, x, "dw_xcorr_backward")?;
    let (oh, ow, c) = (x.h() - z.h() + 1, x.w() - z.w() + 1, z.c());
    if grad.h() != oh || grad.w() != ow || grad.c() != c {
        return Err(Error::ShapeMismatch {
            op: "dw_xcorr_backward",
            left: grad.shape(),
            right: crate::error::Shape3 { h: oh, w: ow, c },
        });
    }
    let mut gz = Tensor3::zeros(z.h(), z.w(), c);
    let mut gx = Tensor3::zeros(x.h(), x.w(), c);
    for oy in 0..oh {
        for ox in 0..ow {
            let g = grad.pixel(oy, ox);
            for dy in 0..z.h() {
                for dx in 0..z.w() {
                    let xp = x.pixel(oy + dy, ox + dx);
                    for (a, (&gv, &xv)) in gz.pixel_mut(dy, dx).iter_mut().zip(g.iter().zip(xp)) {
                        *a += gv * xv;
                    }
                    let zp = z.pixel(dy, dx);
                    for (a, (&gv, &zv)) in gx.pixel_mut(oy + dy, ox + dx).iter_mut().zip(g.iter().zip(zp)) {
                        *a += gv * zv;
                    }
                }
            }
        }
    }
    Ok((gz, gx))
}

/// Parameters of the channel transform, shared by the template and search branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ChTransParams {
    /// 3x3, C -> C, same padding.
    pub phi1: KernelBank,
    /// 1x1, C -> C / r.
    pub fc1: KernelBank,
    /// 1x1, C / r -> C.
    pub fc2: KernelBank,
}

impl ChTransParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(ChTransParams {
            phi1: KernelBank::zeros(channels, channels, 3, 3),
            fc1: KernelBank::zeros(hidden, channels, 1, 1),
            fc2: KernelBank::zeros(channels, hidden, 1, 1),
        })
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(ChTransParams {
            phi1: KernelBank::random(channels, channels, 3, 3, 1.0, rng),
            fc1: KernelBank::random(hidden, channels, 1, 1, 1.0, rng),
            fc2: KernelBank::random(channels, hidden, 1, 1, 1.0, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.phi1.out_channels
    }
}

/// Init gain of the last channel-weight projection.
pub const PHI2_INIT_GAIN: f64 = 0.1;

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::invalid(
            "ch_trans",
            format!("reduction ratio {reduction} does not divide {channels} channels"),
        ));
    }
    Ok(channels / reduction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvcParams {
    pub chtrans: ChTransParams,
    /// 1x1, C -> C.
    pub phi2: KernelBank,
}

impl SvcParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        Ok(SvcParams {
            chtrans: ChTransParams::zeros(channels, reduction)?,
            phi2: KernelBank::zeros(channels, channels, 1, 1),
        })
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        Ok(SvcParams {
            chtrans: ChTransParams::random(channels, reduction, rng)?,
            // small, so the channel field starts as a minor correction to the spatial response
            phi2: KernelBank::random(channels, channels, 1, 1, PHI2_INIT_GAIN, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        SvcParams {
            chtrans: ChTransParams {
                phi1: self.chtrans.phi1.zeros_like(),
                fc1: self.chtrans.fc1.zeros_like(),
                fc2: self.chtrans.fc2.zeros_like(),
            },
            phi2: self.phi2.zeros_like(),
        }
    }
}

#[derive(Debug, Clone)]
struct FcCache {
    input: Tensor3,
    hidden_pre: Tensor3,
    hidden: Tensor3,
}

fn fc_forward(u: &Tensor3, p: &ChTransParams) -> Result<(Tensor3, FcCache)> {
    let hidden_pre = ops::conv2d(u, &p.fc1, Padding::Valid)?;
    let hidden = ops::relu(&hidden_pre);
    let out = ops::conv2d(&hidden, &p.fc2, Padding::Valid)?;
    Ok((
        out,
        FcCache {
            input: u.clone(),
            hidden_pre,
            hidden,
        },
    ))
}

fn fc_backward(p: &ChTransParams, cache: &FcCache, g: &Tensor3, grads: &mut ChTransParams) -> Result<Tensor3> {
    let (gh, g2) = ops::conv2d_backward(&cache.hidden, &p.fc2, Padding::Valid, 1, g)?;
    accumulate(&mut grads.fc2, &g2);
    let gpre = ops::relu_backward(&cache.hidden_pre, &gh);
    let (gu, g1) = ops::conv2d_backward(&cache.input, &p.fc1, Padding::Valid, 1, &gpre)?;
    accumulate(&mut grads.fc1, &g1);
    Ok(gu)
}

pub(crate) fn accumulate(acc: &mut KernelBank, g: &KernelBank) {
    acc.weights.iter_mut().zip(&g.weights).for_each(|(a, b)| *a += b);
    acc.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b);
}

/// Intermediates of one channel-transform evaluation.
#[derive(Debug, Clone)]
pub struct ChTransCache {
    input: Tensor3,
    conv: Tensor3,
    argmax: Vec<usize>,
    pool: (usize, usize),
    fc_max: FcCache,
    fc_avg: FcCache,
}

/// Channel descriptor field: one `C`-vector per pooling window. A template
/// whose extent equals the pool kernel yields a single `1x1xC` descriptor.
pub fn ch_trans(w: &Tensor3, params: &ChTransParams, pool_kh: usize, pool_kw: usize) -> Result<Tensor3> {
    ch_trans_forward(w, params, pool_kh, pool_kw).map(|(t, _)| t)
}

pub fn ch_trans_forward(w: &Tensor3, params: &ChTransParams, pool_kh: usize, pool_kw: usize) -> Result<(Tensor3, ChTransCache)> {
    let conv = ops::conv2d(w, &params.phi1, Padding::Same)?;
    let (pmax, argmax) = ops::max_pool_with_indices(&conv, pool_kh, pool_kw)?;
    let pavg = ops::avg_pool(&conv, pool_kh, pool_kw)?;
    let (dmax, fc_max) = fc_forward(&pmax, params)?;
    let (davg, fc_avg) = fc_forward(&pavg, params)?;
    let out = ops::add(&dmax, &davg)?;
    Ok((
        out,
        ChTransCache {
            input: w.clone(),
            conv,
            argmax,
            pool: (pool_kh, pool_kw),
            fc_max,
            fc_avg,
        },
    ))
}

/// Returns the input cotangent and accumulates parameter cotangents into `grads`.
pub fn ch_trans_backward(params: &ChTransParams, cache: &ChTransCache, g: &Tensor3, grads: &mut ChTransParams) -> Result<Tensor3> {
    let gmax = fc_backward(params, &cache.fc_max, g, grads)?;
    let gavg = fc_backward(params, &cache.fc_avg, g, grads)?;
    let mut gconv = ops::max_pool_backward(cache.conv.shape(), &cache.argmax, &gmax)?;
    let ga = ops::avg_pool_backward(cache.conv.shape(), cache.pool.0, cache.pool.1, &gavg)?;
    gconv.data_mut().iter_mut().zip(ga.data()).for_each(|(a, b)| *a += b);
    let (gin, g1) = ops::conv2d_backward(&cache.input, &params.phi1, Padding::Same, 1, &gconv)?;
    accumulate(&mut grads.phi1, &g1);
    Ok(gin)
}

/// `phi2(tz ⊕ tx)` with `tz` broadcast over every location of `tx`.
pub fn channel_weights(tz: &Tensor3, tx: &Tensor3, phi2: &KernelBank) -> Result<Tensor3> {
    let fused = ops::broadcast_add(tx, tz)?;
    ops::conv2d(&fused, phi2, Padding::Valid)
}

/// Returns `(grad_tz, grad_tx)` and accumulates the `phi2` cotangent.
pub fn channel_weights_backward(
    tz: &Tensor3,
    tx: &Tensor3,
    phi2: &KernelBank,
    g: &Tensor3,
    grad_phi2: &mut KernelBank,
) -> Result<(Tensor3, Tensor3)> {
    let fused = ops::broadcast_add(tx, tz)?;
    let (gf, gp) = ops::conv2d_backward(&fused, phi2, Padding::Valid, 1, g)?;
    accumulate(grad_phi2, &gp);
    let (gtx, gtz) = ops::broadcast_add_backward(&gf);
    Ok((gtz, gtx))
}

#[derive(Debug, Clone)]
pub struct SvcCache {
    z: Tensor3,
    x: Tensor3,
    tz: Tensor3,
    tx: Tensor3,
    cz: ChTransCache,
    cx: ChTransCache,
}

/// `f_ca(z, x) ⊕ f_sa(z, x)`.
pub fn svc_corr(z: &Tensor3, x: &Tensor3, params: &SvcParams) -> Result<Tensor3> {
    svc_corr_forward(z, x, params).map(|(t, _)| t)
}

pub fn svc_corr_forward(z: &Tensor3, x: &Tensor3, params: &SvcParams) -> Result<(Tensor3, SvcCache)> {
    check_pair(z, x, "svc_corr")?;
    let spatial = dw_xcorr(z, x)?;
    let (tz, cz) = ch_trans_forward(z, &params.chtrans, z.h(), z.w())?;
    let (tx, cx) = ch_trans_forward(x, &params.chtrans, z.h(), z.w())?;
    let weights = channel_weights(&tz, &tx, &params.phi2)?;
    let out = ops::add(&spatial, &weights)?;
    Ok((
        out,
        SvcCache {
            z: z.clone(),
            x: x.clone(),
            tz,
            tx,
            cz,
            cx,
        },
    ))
}

/// Returns `(grad_z, grad_x)` and accumulates parameter cotangents into `grads`.
pub fn svc_corr_backward(params: &SvcParams, cache: &SvcCache, g: &Tensor3, grads: &mut SvcParams) -> Result<(Tensor3, Tensor3)> {
    let (mut gz, mut gx) = dw_xcorr_backward(&cache.z, &cache.x, g)?;
    let (gtz, gtx) = channel_weights_backward(&cache.tz, &cache.tx, &params.phi2, g, &mut grads.phi2)?;
    let gz2 = ch_trans_backward(&params.chtrans, &cache.cz, &gtz, &mut grads.chtrans)?;
    let gx2 = ch_trans_backward(&params.chtrans, &cache.cx, &gtx, &mut grads.chtrans)?;
    gz.data_mut().iter_mut().zip(gz2.data()).for_each(|(a, b)| *a += b);
    gx.data_mut().iter_mut().zip(gx2.data()).for_each(|(a, b)| *a += b);
    Ok((gz, gx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sliding_window_oracle(z: &Tensor3, x: &Tensor3) -> Tensor3 {
        Tensor3::from_fn(x.h() - z.h() + 1, x.w() - z.w() + 1, z.c(), |y, xx, c| {
            let mut s = 0.0;
            for dy in 0..z.h() {
                for dx in 0..z.w() {
                    s += z.get(dy, dx, c) * x.get(y + dy, xx + dx, c);
                }
            }
            s
        })
    }

    #[test]
    fn identity_kernel_reproduces_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor3::random(5, 6, 1, -1.0, 1.0, &mut rng);
        let z = Tensor3::filled(1, 1, 1, 1.0);
        assert_eq!(dw_xcorr(&z, &x).unwrap(), x);
    }

    #[test]
    fn response_shape_formula() {
        let out = dw_xcorr(&Tensor3::zeros(4, 4, 8), &Tensor3::zeros(10, 10, 8)).unwrap();
        assert_eq!((out.h(), out.w(), out.c()), (7, 7, 8));
    }

    #[test]
    fn small_case_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor3::random(2, 2, 2, -1.0, 1.0, &mut rng);
        let x = Tensor3::random(3, 3, 2, -1.0, 1.0, &mut rng);
        assert!(dw_xcorr(&z, &x).unwrap().max_abs_diff(&sliding_window_oracle(&z, &x)) <= 1e-12);
        assert!(dw_xcorr_f32(&z, &x).unwrap().max_abs_diff(&sliding_window_oracle(&z, &x)) <= 1e-5);
    }

    #[test]
    fn rejects_bad_pairs() {
        assert!(dw_xcorr(&Tensor3::zeros(2, 2, 3), &Tensor3::zeros(4, 4, 2)).is_err());
        assert!(dw_xcorr(&Tensor3::zeros(5, 2, 2), &Tensor3::zeros(4, 4, 2)).is_err());
    }

    #[test]
    fn template_sized_input_gives_single_descriptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ChTransParams::random(8, 4, &mut rng).unwrap();
        let z = Tensor3::random(4, 4, 8, -1.0, 1.0, &mut rng);
        let t = ch_trans(&z, &p, 4, 4).unwrap();
        assert_eq!((t.h(), t.w(), t.c()), (1, 1, 8));
        assert!(ch_trans(&z, &p, 5, 4).is_err());
    }

    #[test]
    fn search_descriptors_match_per_window_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ChTransParams::random(8, 4, &mut rng).unwrap();
        let x = Tensor3::random(6, 6, 8, -1.0, 1.0, &mut rng);
        let t = ch_trans(&x, &p, 3, 3).unwrap();
        assert_eq!((t.h(), t.w()), (4, 4));
        // oracle: run phi1 on the full map, then pool each window by hand and
        // push it through the bottleneck as a dense layer
        let conv = ops::conv2d(&x, &p.phi1, Padding::Same).unwrap();
        let dense = |u: &[f64]| -> Vec<f64> {
            let hidden: Vec<f64> = (0..p.fc1.out_channels)
                .map(|o| (p.fc1.bias[o] + (0..8).map(|i| p.fc1.weight(o, i, 0, 0) * u[i]).sum::<f64>()).max(0.0))
                .collect();
            (0..8)
                .map(|o| p.fc2.bias[o] + (0..hidden.len()).map(|i| p.fc2.weight(o, i, 0, 0) * hidden[i]).sum::<f64>())
                .collect()
        };
        for wy in 0..4 {
            for wx in 0..4 {
                let win = conv.window(wy, wx, 3, 3).unwrap();
                let mut mx = vec![f64::NEG_INFINITY; 8];
                let mut av = vec![0.0; 8];
                for y in 0..3 {
                    for xx in 0..3 {
                        for c in 0..8 {
                            mx[c] = mx[c].max(win.get(y, xx, c));
                            av[c] += win.get(y, xx, c) / 9.0;
                        }
                    }
                }
                let (a, b) = (dense(&mx), dense(&av));
                for c in 0..8 {
                    assert!((t.get(wy, wx, c) - (a[c] + b[c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_template_descriptor_leaves_phi2_of_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tx = Tensor3::random(3, 3, 4, -1.0, 1.0, &mut rng);
        let phi2 = KernelBank::random(4, 4, 1, 1, 1.0, &mut rng);
        let out = channel_weights(&Tensor3::zeros(1, 1, 4), &tx, &phi2).unwrap();
        assert_eq!(out, ops::conv2d(&tx, &phi2, Padding::Valid).unwrap());
        let tz = Tensor3::random(1, 1, 4, -1.0, 1.0, &mut rng);
        let ident = channel_weights(&tz, &tx, &KernelBank::identity(4)).unwrap();
        assert_eq!(ident, ops::broadcast_add(&tx, &tz).unwrap());
    }

    #[test]
    fn channel_weights_match_per_location_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tz = Tensor3::random(1, 1, 4, -1.0, 1.0, &mut rng);
        let tx = Tensor3::random(3, 2, 4, -1.0, 1.0, &mut rng);
        let mut phi2 = KernelBank::random(4, 4, 1, 1, 1.0, &mut rng);
        phi2.bias = vec![0.1, 0.2, -0.3, 0.0];
        let out = channel_weights(&tz, &tx, &phi2).unwrap();
        for y in 0..3 {
            for x in 0..2 {
                for o in 0..4 {
                    let want = phi2.bias[o]
                        + (0..4).map(|i| phi2.weight(o, i, 0, 0) * (tz.get(0, 0, i) + tx.get(y, x, i))).sum::<f64>();
                    assert!((out.get(y, x, o) - want).abs() < 1e-12);
                }
            }
        }
        assert!(channel_weights(&Tensor3::zeros(2, 1, 4), &tx, &phi2).is_err());
    }

    #[test]
    fn zeroed_params_degenerate_to_dw_xcorr() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor3::random(4, 4, 8, -1.0, 1.0, &mut rng);
        let x = Tensor3::random(9, 9, 8, -1.0, 1.0, &mut rng);
        let p = SvcParams::zeros(8, 4).unwrap();
        let a = svc_corr(&z, &x, &p).unwrap();
        let b = dw_xcorr(&z, &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn self_correlation_is_squared_norm_plus_channel_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor3::random(4, 4, 4, -1.0, 1.0, &mut rng);
        let p = SvcParams::random(4, 2, &mut rng).unwrap();
        let out = svc_corr(&z, &z, &p).unwrap();
        assert_eq!((out.h(), out.w()), (1, 1));
        let tz = ch_trans(&z, &p.chtrans, 4, 4).unwrap();
        let cw = channel_weights(&tz, &tz, &p.phi2).unwrap();
        for c in 0..4 {
            let norm: f64 = (0..4).flat_map(|y| (0..4).map(move |x| (y, x))).map(|(y, x)| z.get(y, x, c).powi(2)).sum();
            assert!((out.get(0, 0, c) - (norm + cw.get(0, 0, c))).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_step_by_step_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = Tensor3::random(3, 3, 4, -1.0, 1.0, &mut rng);
        let x = Tensor3::random(7, 6, 4, -1.0, 1.0, &mut rng);
        let p = SvcParams::random(4, 2, &mut rng).unwrap();
        let tz = ch_trans(&z, &p.chtrans, 3, 3).unwrap();
        let tx = ch_trans(&x, &p.chtrans, 3, 3).unwrap();
        let want = ops::add(&dw_xcorr(&z, &x).unwrap(), &channel_weights(&tz, &tx, &p.phi2).unwrap()).unwrap();
        assert!(svc_corr(&z, &x, &p).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn distinct_subwindows_get_distinct_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SvcParams::random(8, 4, &mut rng).unwrap();
        let z = Tensor3::random(4, 4, 8, 0.0, 1.0, &mut rng);
        let mut x = Tensor3::zeros(12, 12, 8);
        for y in 0..4 {
            for xx in 0..4 {
                for c in 0..8 {
                    x.set(y, xx, c, if c < 4 { 1.0 } else { 0.0 });
                    x.set(8 + y, 8 + xx, c, if c >= 4 { 1.0 } else { 0.0 });
                }
            }
        }
        let tz = ch_trans(&z, &p.chtrans, 4, 4).unwrap();
        let tx = ch_trans(&x, &p.chtrans, 4, 4).unwrap();
        let cw = channel_weights(&tz, &tx, &p.phi2).unwrap();
        let (a, b) = (cw.pixel(0, 0), cw.pixel(8, 8));
        assert!(a.iter().zip(b).any(|(u, v)| (u - v).abs() > 1e-6));
    }

    #[test]
    fn dw_xcorr_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = Tensor3::random(3, 3, 2, -1.0, 1.0, &mut rng);
        let x = Tensor3::random(12, 12, 2, -1.0, 1.0, &mut rng);
        let (sy, sx) = (2, 1);
        let shifted = Tensor3::from_fn(12, 12, 2, |y, xx, c| {
            if y >= sy && xx >= sx {
                x.get(y - sy, xx - sx, c)
            } else {
                0.0
            }
        });
        let a = dw_xcorr(&z, &x).unwrap();
        let b = dw_xcorr(&z, &shifted).unwrap();
        for y in 0..(a.h() - sy) {
            for xx in 0..(a.w() - sx) {
                for c in 0..2 {
                    assert!((b.get(y + sy, xx + sx, c) - a.get(y, xx, c)).abs() < 1e-12);
                }
            }
        }
    }
}
