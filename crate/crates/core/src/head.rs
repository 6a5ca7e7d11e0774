//! Localization head: center heatmap, sub-cell offsets and box sizes on the
//! response grid, the matching Gaussian labels, the heatmap focal loss with
//! L1 regression terms, and box decoding.
//!
//! Response cell `(y, x)` sits at `(x * R, y * R)` in *response coordinates*;
//! callers translate boxes into that frame before building labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::accumulate;
use crate::ops::{self, sigmoid, Padding};
use crate::tensor::{KernelBank, PeakLocation, Tensor2, Tensor3};

/// Axis-aligned box given by its center and extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid("bounding_box", format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

/// Initial logit of the center branch; a sigmoid output of about 0.1.
pub const CENTER_BIAS_INIT: f64 = -2.19;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// 3x3, C -> C, same padding, followed by a rectifier.
    pub trunk: KernelBank,
    /// 1x1, C -> 1, logistic output.
    pub center: KernelBank,
    /// 1x1, C -> 2, channels `(x, y)`.
    pub offset: KernelBank,
    /// 1x1, C -> 2, channels `(w, h)`, exponential output.
    pub size: KernelBank,
}

impl HeadParams {
    pub fn zeros(channels: usize) -> Self {
        HeadParams {
            trunk: KernelBank::zeros(channels, channels, 3, 3),
            center: KernelBank::zeros(1, channels, 1, 1),
            offset: KernelBank::zeros(2, channels, 1, 1),
            size: KernelBank::zeros(2, channels, 1, 1),
        }
    }

    /// Uniform fan-in trunk, small branch weights and a low-confidence center prior.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut center = KernelBank::random(1, channels, 1, 1, 0.1, rng);
        center.bias[0] = CENTER_BIAS_INIT;
        HeadParams {
            trunk: KernelBank::random(channels, channels, 3, 3, 1.0, rng),
            center,
            offset: KernelBank::random(2, channels, 1, 1, 0.1, rng),
            size: KernelBank::random(2, channels, 1, 1, 0.1, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.trunk.in_channels
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams {
            trunk: self.trunk.zeros_like(),
            center: self.center.zeros_like(),
            offset: self.offset.zeros_like(),
            size: self.size.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub heatmap: Tensor2,
    /// `H x W x 2`, channels `(x, y)` in cells.
    pub offsets: Tensor3,
    /// `H x W x 2`, channels `(w, h)` in cells.
    pub sizes: Tensor3,
}

impl HeadOutputs {
    pub fn h(&self) -> usize {
        self.heatmap.h()
    }

    pub fn w(&self) -> usize {
        self.heatmap.w()
    }

    /// Channels `(heatmap, off_x, off_y, size_w, size_h)` stacked into one tensor.
    pub fn stacked(&self) -> Tensor3 {
        Tensor3::from_fn(self.h(), self.w(), 5, |y, x, c| match c {
            0 => self.heatmap.get(y, x),
            1 | 2 => self.offsets.get(y, x, c - 1),
            _ => self.sizes.get(y, x, c - 3),
        })
    }
}

/// Cotangents with respect to each head output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputGrads {
    pub heatmap: Tensor2,
    pub offsets: Tensor3,
    pub sizes: Tensor3,
}

impl HeadOutputGrads {
    pub fn zeros(h: usize, w: usize) -> Self {
        HeadOutputGrads {
            heatmap: Tensor2::zeros(h, w),
            offsets: Tensor3::zeros(h, w, 2),
            sizes: Tensor3::zeros(h, w, 2),
        }
    }

    pub fn add_assign(&mut self, other: &HeadOutputGrads) {
        let pairs = [
            (self.heatmap.data_mut(), other.heatmap.data()),
            (self.offsets.data_mut(), other.offsets.data()),
            (self.sizes.data_mut(), other.sizes.data()),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Tensor3,
    trunk_pre: Tensor3,
    trunk: Tensor3,
}

pub fn head_forward(resp: &Tensor3, params: &HeadParams) -> Result<HeadOutputs> {
    head_forward_cached(resp, params).map(|(o, _)| o)
}

pub fn head_forward_cached(resp: &Tensor3, params: &HeadParams) -> Result<(HeadOutputs, HeadCache)> {
    if resp.c() != params.channels() {
        return Err(Error::invalid(
            "head_forward",
            format!("response stack {} has {} channels, head expects {}", resp.shape(), resp.c(), params.channels()),
        ));
    }
    let trunk_pre = ops::conv2d(resp, &params.trunk, Padding::Same)?;
    let trunk = ops::relu(&trunk_pre);
    let logits = ops::conv2d(&trunk, &params.center, Padding::Valid)?;
    let heatmap = Tensor2::from_vec(trunk.h(), trunk.w(), logits.data().iter().map(|&v| sigmoid(v)).collect())?;
    let offsets = ops::conv2d(&trunk, &params.offset, Padding::Valid)?;
    let sizes = ops::conv2d(&trunk, &params.size, Padding::Valid)?.map(f64::exp);
    Ok((
        HeadOutputs { heatmap, offsets, sizes },
        HeadCache {
            input: resp.clone(),
            trunk_pre,
            trunk,
        },
    ))
}

/// Returns the response-stack cotangent and accumulates parameter cotangents.
pub fn head_backward(
    params: &HeadParams,
    cache: &HeadCache,
    outs: &HeadOutputs,
    g: &HeadOutputGrads,
    grads: &mut HeadParams,
) -> Result<Tensor3> {
    let (h, w) = (outs.h(), outs.w());
    let g_logit = Tensor3::from_vec(
        h,
        w,
        1,
        outs.heatmap
            .data()
            .iter()
            .zip(g.heatmap.data())
            .map(|(&p, &gp)| gp * p * (1.0 - p))
            .collect(),
    )?;
    let mut g_size_raw = g.sizes.clone();
    for (a, &s) in g_size_raw.data_mut().iter_mut().zip(outs.sizes.data()) {
        *a *= s;
    }
    let (mut g_trunk, gc) = ops::conv2d_backward(&cache.trunk, &params.center, Padding::Valid, 1, &g_logit)?;
    accumulate(&mut grads.center, &gc);
    for (bank, acc, grad) in [
        (&params.offset, &mut grads.offset, &g.offsets),
        (&params.size, &mut grads.size, &g_size_raw),
    ] {
        let (gt, gb) = ops::conv2d_backward(&cache.trunk, bank, Padding::Valid, 1, grad)?;
        accumulate(acc, &gb);
        g_trunk.data_mut().iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b);
    }
    let g_pre = ops::relu_backward(&cache.trunk_pre, &g_trunk);
    let (g_in, gt) = ops::conv2d_backward(&cache.input, &params.trunk, Padding::Same, 1, &g_pre)?;
    accumulate(&mut grads.trunk, &gt);
    Ok(g_in)
}

/// Training targets for one response map.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub heatmap: Tensor2,
    pub center_x: usize,
    pub center_y: usize,
    /// Sub-cell remainder `(x, y)` in `[0, 1)`.
    pub offset: [f64; 2],
    /// `(w, h)` in cells.
    pub size: [f64; 2],
    pub sigma: f64,
}

impl Labels {
    pub fn peak(&self) -> PeakLocation {
        PeakLocation::new(self.center_y, self.center_x, 1.0)
    }
}

/// Largest radius (in cells) at which a shifted box of size `w x h` still
/// overlaps the original by at least `min_overlap`.
pub fn gaussian_radius(w: f64, h: f64, min_overlap: f64) -> f64 {
    let a1 = 1.0;
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;

    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

/// Label spread for a box of `w x h` cells.
pub fn label_sigma(w_cells: f64, h_cells: f64) -> f64 {
    (gaussian_radius(w_cells, h_cells, 0.7) / 3.0).max(1.0)
}

/// Gaussian heatmap, center cell, offset and size targets for `b` given in
/// response coordinates.
pub fn make_labels(b: &BoundingBox, map_h: usize, map_w: usize, stride: usize) -> Result<Labels> {
    b.validate()?;
    if stride == 0 {
        return Err(Error::invalid("make_labels", "stride must be positive"));
    }
    let r = stride as f64;
    let (ux, uy) = (b.cx / r, b.cy / r);
    let (fx, fy) = (ux.floor(), uy.floor());
    if fx < 0.0 || fy < 0.0 || fx >= map_w as f64 || fy >= map_h as f64 {
        return Err(Error::invalid(
            "make_labels",
            format!("center ({}, {}) falls outside the {map_h}x{map_w} grid", b.cx, b.cy),
        ));
    }
    let (center_x, center_y) = (fx as usize, fy as usize);
    let size = [b.w / r, b.h / r];
    let sigma = label_sigma(size[0], size[1]);
    let denom = 2.0 * sigma * sigma;
    let heatmap = Tensor2::from_fn(map_h, map_w, |y, x| {
        let dx = x as f64 - center_x as f64;
        let dy = y as f64 - center_y as f64;
        (-(dx * dx + dy * dy) / denom).exp()
    });
    Ok(Labels {
        heatmap,
        center_x,
        center_y,
        offset: [ux - fx, uy - fy],
        size,
        sigma,
    })
}

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const FOCAL_EPS: f64 = 1e-7;

/// Penalty-reduced pixel-wise focal loss and its gradient with respect to `pred`,
/// normalized by the number of exact-one label cells (at least one).
pub fn focal_loss(pred: &Tensor2, label: &Tensor2) -> Result<(f64, Tensor2)> {
    if !pred.same_shape(label) {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            left: pred.shape(),
            right: label.shape(),
        });
    }
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    let npos = label.data().iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(pred.h(), pred.w());
    for ((g, &raw), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(label.data()) {
        let p = raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let inside = raw == p;
        let (l, d) = if y == 1.0 {
            let q = 1.0 - p;
            (-q.powf(a) * p.ln(), a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p)
        } else {
            let wgt = (1.0 - y).powf(b);
            let lq = (1.0 - p).ln();
            (
                -wgt * p.powf(a) * lq,
                -wgt * (a * p.powf(a - 1.0) * lq - p.powf(a) / (1.0 - p)),
            )
        };
        loss += l;
        *g = if inside { d / npos } else { 0.0 };
    }
    Ok((loss / npos, grad))
}

/// Weighted components of the per-frame objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseLoss {
    pub cls: f64,
    pub off: f64,
    pub size: f64,
    pub total: f64,
}

fn l1_at(pred: &Tensor3, y: usize, x: usize, target: &[f64; 2], grad: &mut Tensor3, scale: f64) -> f64 {
    let mut s = 0.0;
    for c in 0..2 {
        let d = pred.get(y, x, c) - target[c];
        s += d.abs();
        grad.set(y, x, c, scale * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 });
    }
    s
}

/// `L_cls + λ_off L_off + λ_size L_size` and its cotangents; the regression
/// terms act only at the label's center cell.
pub fn base_loss_with_grad(outs: &HeadOutputs, labels: &Labels, lambda_off: f64, lambda_size: f64) -> Result<(BaseLoss, HeadOutputGrads)> {
    let (cls, g_heat) = focal_loss(&outs.heatmap, &labels.heatmap)?;
    let (h, w) = (outs.h(), outs.w());
    let mut grads = HeadOutputGrads::zeros(h, w);
    grads.heatmap = g_heat;
    let (cy, cx) = (labels.center_y, labels.center_x);
    let off = l1_at(&outs.offsets, cy, cx, &labels.offset, &mut grads.offsets, lambda_off);
    let size = l1_at(&outs.sizes, cy, cx, &labels.size, &mut grads.sizes, lambda_size);
    let total = cls + lambda_off * off + lambda_size * size;
    Ok((BaseLoss { cls, off, size, total }, grads))
}

pub fn base_loss(outs: &HeadOutputs, labels: &Labels, lambda_off: f64, lambda_size: f64) -> Result<f64> {
    base_loss_with_grad(outs, labels, lambda_off, lambda_size).map(|(l, _)| l.total)
}

/// Box in response coordinates read off the head outputs at `loc`.
pub fn decode_box(outs: &HeadOutputs, loc: &PeakLocation, stride: usize) -> BoundingBox {
    let r = stride as f64;
    let (y, x) = (loc.y, loc.x);
    BoundingBox::new(
        (x as f64 + outs.offsets.get(y, x, 0)) * r,
        (y as f64 + outs.offsets.get(y, x, 1)) * r,
        outs.sizes.get(y, x, 0) * r,
        outs.sizes.get(y, x, 1) * r,
    )
}
