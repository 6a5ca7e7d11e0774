//! Online tracking loop: initialization from a box, per-frame stepping with
//! temporal candidate selection, window and scale penalties, box emission.

use serde::{Deserialize, Serialize};

use crate::arm::{arm_reweight, arm_select, ArmCandidateScore, ArmMemory};
use crate::error::{Error, Result};
use crate::features::{crop_search, crop_template, extract, CropWindow, FrameInput};
use crate::head::{decode_box, make_labels, BoundingBox, HeadOutputs};
use crate::model::{Model, Precision};
use crate::ops::hanning2d;
use crate::tensor::{PeakLocation, Tensor2, Tensor3};

/// When the temporal memory is rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefreshPolicy {
    /// Only when a secondary candidate wins the temporal test.
    #[default]
    Literal,
    /// After every frame, from the emitted box and the raw heatmap.
    Always,
}

impl std::str::FromStr for RefreshPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(RefreshPolicy::Literal),
            "always" => Ok(RefreshPolicy::Always),
            _ => Err(Error::invalid("refresh", format!("unknown policy `{s}` (expected literal or always)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// Enables temporal candidate selection.
    pub arm: bool,
    /// Number of candidates scored per frame.
    pub k: usize,
    pub window_influence: f64,
    pub penalty_k: f64,
    pub refresh: RefreshPolicy,
    pub precision: Precision,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            arm: true,
            k: 3,
            window_influence: 0.35,
            penalty_k: 0.04,
            refresh: RefreshPolicy::Literal,
            precision: Precision::Double,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("track_config", "k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.window_influence) {
            return Err(Error::invalid("track_config", "window influence must lie in [0, 1]"));
        }
        if !(self.penalty_k >= 0.0) {
            return Err(Error::invalid("track_config", "penalty coefficient must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub memory: ArmMemory,
    /// Last emitted box, frame pixels.
    pub last_box: BoundingBox,
    pub frame: usize,
    template: Tensor3,
    scale: f64,
}

impl TrackerState {
    pub fn template(&self) -> &Tensor3 {
        &self.template
    }

    /// Frame pixels per crop pixel, fixed at initialization.
    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Everything produced for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub frame: usize,
    pub bbox: BoundingBox,
    /// Raw heatmap value at the chosen location.
    pub confidence: f64,
    /// 1-based winning candidate; 1 when candidate selection did not run.
    pub k_hat: usize,
    pub candidates: Vec<ArmCandidateScore>,
    /// Heatmap after reweighting and penalties.
    pub heatmap: Tensor2,
    pub raw: HeadOutputs,
    /// Search crop used for this frame.
    pub window: CropWindow,
}

/// Offset between response coordinates and search-crop pixels.
fn response_origin(model: &Model) -> f64 {
    let g = model.config.geometry;
    (g.stride * g.template_cells) as f64 / 2.0
}

/// Box in frame pixels expressed in the response coordinates of `window`.
pub fn to_response(model: &Model, window: &CropWindow, b: &BoundingBox) -> BoundingBox {
    let o = response_origin(model);
    window.frame_to_crop(b).translated(-o, -o)
}

pub fn from_response(model: &Model, window: &CropWindow, b: &BoundingBox) -> BoundingBox {
    let o = response_origin(model);
    window.crop_to_frame(&b.translated(o, o))
}

fn search_forward(model: &Model, frame: &FrameInput, template: &Tensor3, cx: f64, cy: f64, scale: f64, precision: Precision) -> Result<(HeadOutputs, CropWindow)> {
    let (crop, window) = crop_search(frame, cx, cy, scale, &model.config.geometry);
    let x = extract(&crop, model.backbone.as_ref())?;
    Ok((model.forward(template, &x, precision)?, window))
}

pub fn init(first_frame: &FrameInput, b: &BoundingBox, model: &Model, cfg: &TrackConfig) -> Result<TrackerState> {
    b.validate()?;
    cfg.validate()?;
    let (tpl, tw) = crop_template(first_frame, b, &model.config.geometry);
    let template = extract(&tpl, model.backbone.as_ref())?;
    let (outs, window) = search_forward(model, first_frame, &template, b.cx, b.cy, tw.scale, cfg.precision)?;
    let labels = make_labels(&to_response(model, &window, b), outs.h(), outs.w(), model.config.geometry.stride)?;
    let p = labels.heatmap.argmax();
    Ok(TrackerState {
        memory: ArmMemory::new(labels.heatmap, outs.heatmap, p)?,
        last_box: *b,
        frame: first_frame.index,
        template,
        scale: tw.scale,
    })
}

/// `(1 - w) * penalty * heat + w * hann`, where the penalty discourages
/// aspect and scale changes of the predicted size relative to `last_cells`.
pub fn apply_window_penalty(heat: &Tensor2, sizes: &Tensor3, last_cells: (f64, f64), cfg: &TrackConfig) -> Result<Tensor2> {
    if sizes.h() != heat.h() || sizes.w() != heat.w() || sizes.c() != 2 {
        return Err(Error::ShapeMismatch {
            op: "apply_window_penalty",
            left: heat.shape(),
            right: sizes.shape(),
        });
    }
    let change = |r: f64| r.max(1.0 / r);
    let (lw, lh) = last_cells;
    let hann = hanning2d(heat.h(), heat.w());
    let wi = cfg.window_influence;
    Ok(Tensor2::from_fn(heat.h(), heat.w(), |y, x| {
        let (w, h) = (sizes.get(y, x, 0), sizes.get(y, x, 1));
        let r = change((w / h) / (lw / lh));
        let s = change((w * h).sqrt() / (lw * lh).sqrt());
        let pen = (-cfg.penalty_k * (r * s - 1.0)).exp();
        (1.0 - wi) * pen * heat.get(y, x) + wi * hann.get(y, x)
    }))
}

pub fn step(state: &TrackerState, frame: &FrameInput, model: &Model, cfg: &TrackConfig) -> Result<(StepOutput, TrackerState)> {
    let stride = model.config.geometry.stride;
    let (outs, window) = search_forward(
        model,
        frame,
        &state.template,
        state.last_box.cx,
        state.last_box.cy,
        state.scale,
        cfg.precision,
    )?;
    let mut next = state.clone();
    next.frame = frame.index;

    let mut heat = outs.heatmap.clone();
    let mut k_hat = 1;
    let mut candidates = Vec::new();
    if cfg.arm {
        let (k, scores) = arm_select(&heat, &state.memory, cfg.k)?;
        k_hat = k;
        candidates = scores;
        if k_hat != 1 {
            let q = candidates[k_hat - 1].q;
            heat = arm_reweight(&heat, &state.memory, &q)?;
            next.memory.advance(&q);
        }
    }

    let last = to_response(model, &window, &state.last_box);
    let last_cells = (last.w / stride as f64, last.h / stride as f64);
    let heat = apply_window_penalty(&heat, &outs.sizes, last_cells, cfg)?;
    let loc = heat.argmax();
    let in_response = decode_box(&outs, &loc, stride);
    let (fw, fh) = frame.extent_px(stride);
    let mut bbox = from_response(model, &window, &in_response);
    bbox.cx = bbox.cx.clamp(0.0, fw);
    bbox.cy = bbox.cy.clamp(0.0, fh);
    next.last_box = bbox;

    if cfg.refresh == RefreshPolicy::Always {
        let label = make_labels(&in_response, outs.h(), outs.w(), stride)
            .map(|l| l.heatmap)
            .unwrap_or_else(|_| next.memory.label_last.clone());
        next.memory = ArmMemory::new(label, outs.heatmap.clone(), PeakLocation::new(loc.y, loc.x, loc.score))?;
    }

    Ok((
        StepOutput {
            frame: frame.index,
            bbox,
            confidence: outs.heatmap.get(loc.y, loc.x),
            k_hat,
            candidates,
            heatmap: heat,
            raw: outs,
            window,
        },
        next,
    ))
}

/// Initializes on `frames[0]` with `b` and steps over the rest.
pub fn track_sequence(frames: &[FrameInput], b: &BoundingBox, model: &Model, cfg: &TrackConfig) -> Result<Vec<StepOutput>> {
    let first = frames.first().ok_or_else(|| Error::invalid("track", "empty sequence"))?;
    let mut state = init(first, b, model, cfg)?;
    let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
    for f in &frames[1..] {
        let (o, s) = step(&state, f, model, cfg)?;
        out.push(o);
        state = s;
    }
    Ok(out)
}
