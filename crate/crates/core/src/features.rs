//! Template/search feature production.
//!
//! Two frontends share one entry point: a small strided convolutional stack
//! for grayscale pixel frames, and a pass-through for frames that already
//! carry a feature map (the simulator's default output).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BoundingBox;
use crate::ops::{self, Padding};
use crate::tensor::{KernelBank, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneLayer {
    pub bank: KernelBank,
    pub stride: usize,
}

/// Ordered conv layers, each followed by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<BackboneLayer>,
}

impl BackboneParams {
    /// Three 3x3 layers with strides (2, 2, 2): `in -> 8 -> feat -> feat`.
    pub fn toy<R: Rng + ?Sized>(in_channels: usize, feat_channels: usize, rng: &mut R) -> Self {
        let widths = [in_channels, 8, feat_channels, feat_channels];
        let layers = widths
            .windows(2)
            .map(|w| BackboneLayer {
                bank: KernelBank::random(w[1], w[0], 3, 3, 1.0, rng),
                stride: 2,
            })
            .collect();
        BackboneParams { layers }
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bank.out_channels)
    }

    pub fn validate(&self, stride: usize, feat_channels: usize) -> Result<()> {
        if self.layers.iter().any(|l| l.stride != 1 && l.stride != 2) {
            return Err(Error::invalid("backbone", "layer strides must be 1 or 2"));
        }
        if self.total_stride() != stride {
            return Err(Error::invalid(
                "backbone",
                format!("stride product {} differs from R = {stride}", self.total_stride()),
            ));
        }
        if self.out_channels() != feat_channels {
            return Err(Error::invalid(
                "backbone",
                format!("final width {} differs from {feat_channels} feature channels", self.out_channels()),
            ));
        }
        for pair in self.layers.windows(2) {
            if pair[0].bank.out_channels != pair[1].bank.in_channels {
                return Err(Error::invalid("backbone", "consecutive layer widths disagree"));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        BackboneParams {
            layers: self
                .layers
                .iter()
                .map(|l| BackboneLayer {
                    bank: l.bank.zeros_like(),
                    stride: l.stride,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FramePayload {
    /// Grayscale (or few-channel) image in pixel units.
    Pixels(Tensor3),
    /// Precomputed feature map, one element per stride-R cell.
    Features(Tensor3),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub index: usize,
    pub payload: FramePayload,
}

impl FrameInput {
    pub fn pixels(index: usize, t: Tensor3) -> Self {
        FrameInput {
            index,
            payload: FramePayload::Pixels(t),
        }
    }

    pub fn features(index: usize, t: Tensor3) -> Self {
        FrameInput {
            index,
            payload: FramePayload::Features(t),
        }
    }

    pub fn tensor(&self) -> &Tensor3 {
        match &self.payload {
            FramePayload::Pixels(t) | FramePayload::Features(t) => t,
        }
    }

    pub fn is_features(&self) -> bool {
        matches!(self.payload, FramePayload::Features(_))
    }

    /// Pixels covered by one element of the payload grid.
    pub fn pixels_per_unit(&self, stride: usize) -> f64 {
        if self.is_features() {
            stride as f64
        } else {
            1.0
        }
    }

    /// Frame extent in pixels as (width, height).
    pub fn extent_px(&self, stride: usize) -> (f64, f64) {
        let u = self.pixels_per_unit(stride);
        let t = self.tensor();
        (t.w() as f64 * u, t.h() as f64 * u)
    }
}

/// Activations retained for the backward pass through the pixel frontend.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Input to each layer, then the final output.
    inputs: Vec<Tensor3>,
    pre_activations: Vec<Tensor3>,
}

/// Produces the feature map for `frame`. Feature payloads pass through
/// unchanged; pixel payloads need a backbone.
pub fn extract(frame: &FrameInput, backbone: Option<&BackboneParams>) -> Result<Tensor3> {
    extract_with_cache(frame, backbone).map(|(t, _)| t)
}

pub fn extract_with_cache(frame: &FrameInput, backbone: Option<&BackboneParams>) -> Result<(Tensor3, Option<BackboneCache>)> {
    match &frame.payload {
        FramePayload::Features(t) => Ok((t.clone(), None)),
        FramePayload::Pixels(px) => {
            let bb = backbone.ok_or_else(|| Error::invalid("extract", "pixel frame without a backbone"))?;
            let r = bb.total_stride();
            if px.h() % r != 0 || px.w() % r != 0 {
                return Err(Error::invalid(
                    "extract",
                    format!("{}x{} pixels not divisible by stride {r}", px.h(), px.w()),
                ));
            }
            let mut inputs = vec![px.clone()];
            let mut pre = Vec::with_capacity(bb.layers.len());
            for layer in &bb.layers {
                let z = ops::conv2d_strided(inputs.last().expect("non-empty"), &layer.bank, Padding::Same, layer.stride)?;
                inputs.push(ops::relu(&z));
                pre.push(z);
            }
            let out = inputs.last().expect("non-empty").clone();
            Ok((
                out,
                Some(BackboneCache {
                    inputs,
                    pre_activations: pre,
                }),
            ))
        }
    }
}

/// Accumulates parameter cotangents of the pixel frontend into `grads`.
pub fn backbone_backward(
    backbone: &BackboneParams,
    cache: &BackboneCache,
    grad_out: &Tensor3,
    grads: &mut BackboneParams,
) -> Result<Tensor3> {
    let mut g = grad_out.clone();
    for (i, layer) in backbone.layers.iter().enumerate().rev() {
        let gz = ops::relu_backward(&cache.pre_activations[i], &g);
        let (gin, gbank) = ops::conv2d_backward(&cache.inputs[i], &layer.bank, Padding::Same, layer.stride, &gz)?;
        let acc = &mut grads.layers[i].bank;
        acc.weights.iter_mut().zip(&gbank.weights).for_each(|(a, b)| *a += b);
        acc.bias.iter_mut().zip(&gbank.bias).for_each(|(a, b)| *a += b);
        g = gin;
    }
    Ok(g)
}

/// Template/search grid sizes in feature cells and the pixel stride between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropGeometry {
    pub template_cells: usize,
    pub search_cells: usize,
    pub stride: usize,
}

impl Default for CropGeometry {
    fn default() -> Self {
        CropGeometry {
            template_cells: 4,
            search_cells: 16,
            stride: 8,
        }
    }
}

impl CropGeometry {
    pub fn response_cells(&self) -> usize {
        self.search_cells + 1 - self.template_cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.template_cells == 0 || self.search_cells < self.template_cells || self.stride == 0 {
            return Err(Error::invalid(
                "crop_geometry",
                format!("template {} / search {} / stride {}", self.template_cells, self.search_cells, self.stride),
            ));
        }
        Ok(())
    }
}

/// Side of the square template context, in pixels: `sqrt((w + p)(h + p))`, `p = (w + h) / 2`.
pub fn context_side(b: &BoundingBox) -> f64 {
    let p = 0.5 * (b.w + b.h);
    ((b.w + p) * (b.h + p)).sqrt()
}

/// Placement of a crop inside its source frame. Crop pixel `P` sits at frame
/// pixel `origin + P * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl CropWindow {
    pub fn centered(cx: f64, cy: f64, side_px: f64, out_px: f64) -> Self {
        CropWindow {
            origin_x: cx - side_px / 2.0,
            origin_y: cy - side_px / 2.0,
            scale: side_px / out_px,
        }
    }

    pub fn frame_to_crop(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            cx: (b.cx - self.origin_x) / self.scale,
            cy: (b.cy - self.origin_y) / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }

    pub fn crop_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            cx: self.origin_x + b.cx * self.scale,
            cy: self.origin_y + b.cy * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }
}

/// Bilinear resample of a square region, replicating edge values outside the frame.
pub fn crop_resample(frame: &FrameInput, window: &CropWindow, out_cells: usize, stride: usize) -> FrameInput {
    let src = frame.tensor();
    let unit = frame.pixels_per_unit(stride);
    let out_n = if frame.is_features() { out_cells } else { out_cells * stride };
    // frame units per output element
    let step = window.scale * (out_cells * stride) as f64 / out_n as f64 / unit;
    let ox = window.origin_x / unit;
    let oy = window.origin_y / unit;
    let c = src.c();
    let mut out = Tensor3::zeros(out_n, out_n, c);
    let axis = |origin: f64, i: usize, n: usize| -> (usize, usize, f64) {
        let u = (origin + (i as f64 + 0.5) * step - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    for y in 0..out_n {
        let (y0, y1, fy) = axis(oy, y, src.h());
        for x in 0..out_n {
            let (x0, x1, fx) = axis(ox, x, src.w());
            let (p00, p01, p10, p11) = (src.pixel(y0, x0), src.pixel(y0, x1), src.pixel(y1, x0), src.pixel(y1, x1));
            let dst = out.pixel_mut(y, x);
            for ch in 0..c {
                let top = p00[ch] + fx * (p01[ch] - p00[ch]);
                let bottom = p10[ch] + fx * (p11[ch] - p10[ch]);
                dst[ch] = top + fy * (bottom - top);
            }
        }
    }
    match frame.payload {
        FramePayload::Features(_) => FrameInput::features(frame.index, out),
        FramePayload::Pixels(_) => FrameInput::pixels(frame.index, out),
    }
}

/// Template crop: the context square around `b` resampled to the template grid.
pub fn crop_template(frame: &FrameInput, b: &BoundingBox, geom: &CropGeometry) -> (FrameInput, CropWindow) {
    let out_px = (geom.template_cells * geom.stride) as f64;
    let window = CropWindow::centered(b.cx, b.cy, context_side(b), out_px);
    (crop_resample(frame, &window, geom.template_cells, geom.stride), window)
}

/// Search crop centred on `(cx, cy)` with a fixed frame-pixel-per-crop-pixel `scale`.
pub fn crop_search(frame: &FrameInput, cx: f64, cy: f64, scale: f64, geom: &CropGeometry) -> (FrameInput, CropWindow) {
    let out_px = (geom.search_cells * geom.stride) as f64;
    let window = CropWindow::centered(cx, cy, out_px * scale, out_px);
    (crop_resample(frame, &window, geom.search_cells, geom.stride), window)
}

/// Template crop around `b` and a search crop at the same scale centred on `search_center`.
pub fn crop_regions(
    frame: &FrameInput,
    b: &BoundingBox,
    search_center: (f64, f64),
    geom: &CropGeometry,
) -> (FrameInput, FrameInput, CropWindow) {
    let (template, tw) = crop_template(frame, b, geom);
    let (search, sw) = crop_search(frame, search_center.0, search_center.1, tw.scale, geom);
    (template, search, sw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pass_through_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor3::random(8, 8, 16, -1.0, 1.0, &mut rng);
        let out = extract(&FrameInput::features(0, t.clone()), None).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn stride_schedule_reduces_by_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = BackboneParams::toy(1, 16, &mut rng);
        bb.validate(8, 16).unwrap();
        let px = Tensor3::random(64, 64, 1, 0.0, 1.0, &mut rng);
        let out = extract(&FrameInput::pixels(0, px), Some(&bb)).unwrap();
        assert_eq!((out.h(), out.w(), out.c()), (8, 8, 16));
    }

    #[test]
    fn indivisible_pixels_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = BackboneParams::toy(1, 16, &mut rng);
        let px = Tensor3::zeros(60, 64, 1);
        assert!(extract(&FrameInput::pixels(0, px.clone()), Some(&bb)).is_err());
        assert!(extract(&FrameInput::pixels(0, px), None).is_err());
    }

    #[test]
    fn golden_backbone_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let bb = BackboneParams::toy(1, 16, &mut rng);
        let px = Tensor3::random(32, 32, 1, 0.0, 1.0, &mut rng);
        let out = extract(&FrameInput::pixels(0, px), Some(&bb)).unwrap();
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/backbone_golden.st1");
        if std::env::var_os("STMATCH_BLESS").is_some() {
            io::write_st1(path, &out).unwrap();
        }
        let golden = io::read_st1(path).unwrap();
        assert_eq!(golden.shape(), out.shape());
        assert!(golden.data().iter().zip(out.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn centered_crop_is_exact_copy() {
        let t = Tensor3::from_fn(32, 32, 2, |y, x, c| (y * 100 + x) as f64 + c as f64 * 0.5);
        let frame = FrameInput::features(0, t.clone());
        // 2x2-cell box at cell corner (12, 10): context side 4 cells, scale 1
        let b = BoundingBox::new(10.0 * 8.0, 12.0 * 8.0, 16.0, 16.0);
        let (tpl, win) = crop_template(&frame, &b, &CropGeometry::default());
        assert!((win.scale - 1.0).abs() < 1e-15);
        assert_eq!(tpl.tensor(), &t.window(10, 8, 4, 4).unwrap());
        let (search, _) = crop_search(&frame, b.cx, b.cy, win.scale, &CropGeometry::default());
        assert_eq!(search.tensor(), &t.window(4, 2, 16, 16).unwrap());
    }

    #[test]
    fn corner_crop_replicates_edges() {
        let t = Tensor3::from_fn(20, 20, 1, |y, x, _| (y * 20 + x) as f64);
        let frame = FrameInput::features(0, t.clone());
        let b = BoundingBox::new(0.0, 0.0, 16.0, 16.0);
        let (tpl, _) = crop_template(&frame, &b, &CropGeometry::default());
        let tpl = tpl.tensor();
        assert_eq!(tpl.get(0, 0, 0), t.get(0, 0, 0));
        assert_eq!(tpl.get(1, 0, 0), t.get(0, 0, 0));
        assert_eq!(tpl.get(3, 3, 0), t.get(1, 1, 0));
        assert_eq!(tpl.get(0, 3, 0), t.get(0, 1, 0));
    }

    #[test]
    fn search_to_template_ratio_tracks_255_over_127() {
        let g = CropGeometry {
            template_cells: 8,
            search_cells: 16,
            stride: 8,
        };
        let ratio = g.search_cells as f64 / g.template_cells as f64;
        assert!((ratio - 255.0 / 127.0).abs() < 0.01);
        let frame = FrameInput::features(0, Tensor3::zeros(40, 40, 1));
        let b = BoundingBox::new(160.0, 160.0, 32.0, 32.0);
        let (tpl, search, win) = crop_regions(&frame, &b, (b.cx, b.cy), &g);
        assert_eq!(tpl.tensor().h(), 8);
        assert_eq!(search.tensor().h(), 16);
        assert!((win.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_crops_have_pixel_extent() {
        let frame = FrameInput::pixels(0, Tensor3::filled(256, 256, 1, 0.3));
        let b = BoundingBox::new(128.0, 128.0, 20.0, 12.0);
        let (tpl, search, _) = crop_regions(&frame, &b, (b.cx, b.cy), &CropGeometry::default());
        assert_eq!(tpl.tensor().h(), 32);
        assert_eq!(search.tensor().w(), 128);
        assert!(search.tensor().data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn window_maps_boxes_both_ways() {
        let w = CropWindow::centered(50.0, 70.0, 64.0, 128.0);
        let b = BoundingBox::new(55.0, 66.0, 10.0, 14.0);
        let back = w.crop_to_frame(&w.frame_to_crop(&b));
        assert!((back.cx - b.cx).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
    }
}
