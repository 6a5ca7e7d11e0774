//! End-to-end training on synthetic sequences: triplet sampling, the two-frame
//! objective with its temporal term, momentum SGD with a warmup/decay
//! schedule, and the loss log.

pub mod gradcheck;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arm::{arm_loss_with_grad, ArmPair};
use crate::error::{Error, Result};
use crate::features::{backbone_backward, crop_search, crop_template, extract_with_cache, BackboneCache, FrameInput};
use crate::head::{base_loss_with_grad, make_labels, BoundingBox, HeadOutputGrads, Labels};
use crate::matching::accumulate;
use crate::model::{Model, ModelConfig};
use crate::sim::SyntheticSequence;
use crate::tensor::{PeakLocation, Tensor3};
use crate::tracker::to_response;

/// Linear warmup followed by exponential decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub decay_steps: usize,
    pub lr_end: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_steps: 500,
            lr_start: 0.001,
            lr_peak: 0.005,
            decay_steps: 1500,
            lr_end: 0.0005,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            self.lr_start + (self.lr_peak - self.lr_start) * f
        } else if self.decay_steps == 0 {
            self.lr_end
        } else {
            let f = ((step - self.warmup_steps) as f64 / self.decay_steps as f64).min(1.0);
            self.lr_peak * (self.lr_end / self.lr_peak).powf(f)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lr_start, self.lr_peak, self.lr_end].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("lr_schedule", "learning rates must be positive"));
        }
        Ok(())
    }
}

/// Where the temporal term takes its peaks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeakSource {
    /// Predicted argmax, after the label-peak warm-in fraction.
    #[default]
    Predicted,
    /// Label peaks throughout.
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    /// Rescales the batch gradient to at most this global L2 norm; 0 disables.
    pub grad_clip: f64,
    pub lambda_off: f64,
    pub lambda_size: f64,
    pub lambda_arm: f64,
    /// Largest frame gap (exclusive) between the two search frames.
    pub max_gap: usize,
    /// Uniform search-center jitter, in cells.
    pub jitter_cells: f64,
    /// Backbone groups stay fixed before this step.
    pub freeze_backbone_steps: usize,
    pub peak_source: PeakSource,
    /// Share of steps that use label peaks before switching to predictions.
    pub label_peak_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            seed: 0,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            grad_clip: 10.0,
            lambda_off: 1.0,
            lambda_size: 0.1,
            lambda_arm: 0.5,
            max_gap: 100,
            jitter_cells: 4.0,
            freeze_backbone_steps: 1000,
            peak_source: PeakSource::Predicted,
            label_peak_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch == 0 || self.max_gap < 2 {
            return Err(Error::invalid("train_config", "batch must be positive and max_gap at least 2"));
        }
        if self.lambda_arm < 0.0 || self.lambda_off < 0.0 || self.lambda_size < 0.0 {
            return Err(Error::invalid("train_config", "loss weights must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("train_config", "grad_clip must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train_config", "momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    fn uses_label_peaks(&self, step: usize) -> bool {
        self.peak_source == PeakSource::Label || (step as f64) < self.label_peak_fraction * self.steps as f64
    }
}

/// A template frame and two search frames of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub template: FrameInput,
    pub template_box: BoundingBox,
    pub search_i: FrameInput,
    pub box_i: BoundingBox,
    pub search_k: FrameInput,
    pub box_k: BoundingBox,
    pub i: usize,
    pub gap: usize,
}

/// Template from frame 0, search frame `i` uniform and gap uniform in
/// `[1, min(max_gap, len - i))`.
pub fn sample_triplet<R: Rng + ?Sized>(seq: &SyntheticSequence, max_gap: usize, rng: &mut R) -> Result<Triplet> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::invalid("sample_triplet", format!("sequence of {n} frames; need at least 2")));
    }
    let i = rng.gen_range(0..n - 1);
    let gap = rng.gen_range(1..max_gap.min(n - i));
    Ok(Triplet {
        template: seq.frames[0].clone(),
        template_box: seq.boxes[0],
        search_i: seq.frames[i].clone(),
        box_i: seq.boxes[i],
        search_k: seq.frames[i + gap].clone(),
        box_k: seq.boxes[i + gap],
        i,
        gap,
    })
}

/// Per-step objective, summed over both search frames.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub off: f64,
    pub size: f64,
    pub arm: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.cls += o.cls;
        self.off += o.off;
        self.size += o.size;
        self.arm += o.arm;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.cls *= s;
        self.off *= s;
        self.size *= s;
        self.arm *= s;
        self.total *= s;
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.off, self.size, self.arm, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub off: f64,
    pub size: f64,
    pub arm: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        LossWeights {
            off: c.lambda_off,
            size: c.lambda_size,
            arm: c.lambda_arm,
        }
    }
}

/// Gradient of the two-frame objective with respect to parameters and features.
#[derive(Debug, Clone)]
pub struct PairGradients {
    pub params: Model,
    pub template: Tensor3,
    pub search_i: Tensor3,
    pub search_k: Tensor3,
    pub peaks: (PeakLocation, PeakLocation),
}

/// Two-frame objective on given features: base loss on each search frame plus
/// the weighted temporal term. `peaks` fixes the temporal alignment; when
/// `None` it comes from the predicted heatmaps.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective(
    model: &Model,
    z: &Tensor3,
    x_i: &Tensor3,
    x_k: &Tensor3,
    labels_i: &Labels,
    labels_k: &Labels,
    gap: usize,
    peaks: Option<(PeakLocation, PeakLocation)>,
    w: &LossWeights,
) -> Result<(LossBreakdown, PairGradients)> {
    let (out_i, cache_i) = model.forward_cached(z, x_i)?;
    let (out_k, cache_k) = model.forward_cached(z, x_k)?;
    let (bi, mut gi) = base_loss_with_grad(&out_i, labels_i, w.off, w.size)?;
    let (bk, mut gk) = base_loss_with_grad(&out_k, labels_k, w.off, w.size)?;
    let (p, q) = peaks.unwrap_or_else(|| (out_i.heatmap.argmax(), out_k.heatmap.argmax()));
    let pair = ArmPair::with_peaks(
        out_i.heatmap.clone(),
        out_k.heatmap.clone(),
        labels_i.heatmap.clone(),
        labels_k.heatmap.clone(),
        p,
        q,
        gap,
    )?;
    let mut arm = 0.0;
    if w.arm > 0.0 {
        let (l, g_i, g_k) = arm_loss_with_grad(&pair)?;
        arm = l;
        let scaled = |g: &crate::tensor::Tensor2, h: usize, wd: usize| {
            let mut o = HeadOutputGrads::zeros(h, wd);
            o.heatmap = g.map(|v| v * w.arm);
            o
        };
        gi.add_assign(&scaled(&g_i, out_i.h(), out_i.w()));
        gk.add_assign(&scaled(&g_k, out_k.h(), out_k.w()));
    }
    let mut params = model.zeros_like();
    let (gz_i, g_xi) = model.backward(&cache_i, &out_i, &gi, &mut params)?;
    let (gz_k, g_xk) = model.backward(&cache_k, &out_k, &gk, &mut params)?;
    let mut g_z = gz_i;
    g_z.data_mut().iter_mut().zip(gz_k.data()).for_each(|(a, b)| *a += b);
    let cls = bi.cls + bk.cls;
    let off = bi.off + bk.off;
    let size = bi.size + bk.size;
    let loss = LossBreakdown {
        cls,
        off,
        size,
        arm,
        total: cls + w.off * off + w.size * size + w.arm * arm,
    };
    Ok((
        loss,
        PairGradients {
            params,
            template: g_z,
            search_i: g_xi,
            search_k: g_xk,
            peaks: (p, q),
        },
    ))
}

struct Prepared {
    z: Tensor3,
    z_cache: Option<BackboneCache>,
    x: [(Tensor3, Option<BackboneCache>); 2],
    labels: [Labels; 2],
}

fn prepare(model: &Model, t: &Triplet, jitter: [(f64, f64); 2]) -> Result<Prepared> {
    let geom = model.config.geometry;
    let (tpl, tw) = crop_template(&t.template, &t.template_box, &geom);
    let (z, z_cache) = extract_with_cache(&tpl, model.backbone.as_ref())?;
    let mut xs = Vec::with_capacity(2);
    let mut labels = Vec::with_capacity(2);
    for ((frame, b), (jx, jy)) in [(&t.search_i, &t.box_i), (&t.search_k, &t.box_k)].into_iter().zip(jitter) {
        let (crop, window) = crop_search(frame, b.cx + jx, b.cy + jy, tw.scale, &geom);
        xs.push(extract_with_cache(&crop, model.backbone.as_ref())?);
        let resp = geom.response_cells();
        labels.push(make_labels(&to_response(model, &window, b), resp, resp, geom.stride)?);
    }
    let x: [(Tensor3, Option<BackboneCache>); 2] = xs.try_into().map_err(|_| Error::invalid("prepare", "two search crops"))?;
    let labels: [Labels; 2] = labels.try_into().map_err(|_| Error::invalid("prepare", "two label sets"))?;
    Ok(Prepared { z, z_cache, x, labels })
}

/// Objective and parameter gradient for one triplet, including the pixel
/// backbone when present.
pub fn triplet_gradient(
    model: &Model,
    t: &Triplet,
    jitter: [(f64, f64); 2],
    label_peaks: bool,
    w: &LossWeights,
) -> Result<(LossBreakdown, Model)> {
    let p = prepare(model, t, jitter)?;
    let peaks = label_peaks.then(|| (p.labels[0].peak(), p.labels[1].peak()));
    let (loss, g) = pair_objective(model, &p.z, &p.x[0].0, &p.x[1].0, &p.labels[0], &p.labels[1], t.gap, peaks, w)?;
    let mut grads = g.params;
    if let Some(bb) = &model.backbone {
        let mut gb = bb.zeros_like();
        for (cache, gfeat) in [(&p.z_cache, &g.template), (&p.x[0].1, &g.search_i), (&p.x[1].1, &g.search_k)] {
            if let Some(c) = cache {
                backbone_backward(bb, c, gfeat, &mut gb)?;
            }
        }
        grads.backbone = Some(gb);
    }
    Ok((loss, grads))
}

/// Momentum SGD state: `v <- mu v + g; p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Model,
    pub step: usize,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Parameter groups whose names start with one of these stay fixed.
    pub frozen: Vec<String>,
    /// Global gradient-norm cap; 0 disables.
    pub grad_clip: f64,
}

impl OptimState {
    pub fn new(model: &Model, momentum: f64, schedule: LrSchedule) -> Self {
        OptimState {
            velocity: model.zeros_like(),
            step: 0,
            momentum,
            schedule,
            frozen: Vec::new(),
            grad_clip: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Applies one update and advances the step counter; returns the rate used.
    pub fn apply(&mut self, model: &mut Model, grads: &Model) -> Result<f64> {
        let lr = self.lr();
        let mu = self.momentum;
        let frozen: Vec<bool> = model.banks().iter().map(|(n, _)| self.is_frozen(n)).collect();
        let grads = grads.banks();
        let norm = grads
            .iter()
            .zip(&frozen)
            .filter(|(_, f)| !**f)
            .flat_map(|((_, b), _)| b.weights.iter().chain(&b.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let s = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let vel = self.velocity.banks_mut();
        if grads.len() != vel.len() || frozen.len() != vel.len() {
            return Err(Error::invalid("sgd", "gradient layout does not match the model"));
        }
        for ((((_, p), (_, v)), (_, g)), fz) in model.banks_mut().into_iter().zip(vel).zip(grads).zip(frozen) {
            if fz {
                continue;
            }
            for (pw, (vw, gw)) in p.weights.iter_mut().zip(v.weights.iter_mut().zip(&g.weights)) {
                *vw = mu * *vw + s * gw;
                *pw -= lr * *vw;
            }
            for (pb, (vb, gb)) in p.bias.iter_mut().zip(v.bias.iter_mut().zip(&g.bias)) {
                *vb = mu * *vb + s * gb;
                *pb -= lr * *vb;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

fn add_grads(acc: &mut Model, g: &Model) {
    for ((_, a), (_, b)) in acc.banks_mut().into_iter().zip(g.banks()) {
        accumulate(a, b);
    }
}

fn scale_grads(g: &mut Model, s: f64) {
    for (_, b) in g.banks_mut() {
        b.weights.iter_mut().for_each(|v| *v *= s);
        b.bias.iter_mut().for_each(|v| *v *= s);
    }
}

/// Batch-mean objective and gradient. Triplets may be evaluated in parallel;
/// the reduction runs in batch order so the result does not depend on the
/// thread count.
pub fn batch_gradient(
    model: &Model,
    batch: &[(Triplet, [(f64, f64); 2])],
    label_peaks: bool,
    w: &LossWeights,
) -> Result<(LossBreakdown, Model)> {
    let parts = batch
        .par_iter()
        .map(|(t, j)| triplet_gradient(model, t, *j, label_peaks, w))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = LossBreakdown::default();
    let mut grads = model.zeros_like();
    for (l, g) in &parts {
        loss.add(l);
        add_grads(&mut grads, g);
    }
    let s = 1.0 / batch.len().max(1) as f64;
    loss.scale(s);
    scale_grads(&mut grads, s);
    Ok((loss, grads))
}

/// One SGD step on a batch; aborts on a non-finite objective or gradient.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimState,
    batch: &[(Triplet, [(f64, f64); 2])],
    label_peaks: bool,
    w: &LossWeights,
) -> Result<LossRecord> {
    let (loss, grads) = batch_gradient(model, batch, label_peaks, w)?;
    if !loss.is_finite() || !grads.is_finite() {
        let frames: Vec<(usize, usize)> = batch.iter().map(|(t, _)| (t.i, t.gap)).collect();
        return Err(Error::NonFinite(format!(
            "step {}: loss {:?}, lr {}, triplets (i, gap) {:?}, parameters finite: {}",
            opt.step,
            loss,
            opt.lr(),
            frames,
            model.is_finite()
        )));
    }
    let step = opt.step;
    let lr = opt.apply(model, &grads)?;
    Ok(LossRecord { step, loss, lr })
}

/// Draws the batch for one step: sequences in shuffled passes, one triplet each.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n_sequences: usize) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n_sequences).collect(),
            cursor: n_sequences,
        }
    }

    pub fn next_batch(&mut self, data: &[SyntheticSequence], cfg: &TrainConfig) -> Result<Vec<(Triplet, [(f64, f64); 2])>> {
        let r = data.first().map_or(8.0, |s| s.config.stride as f64);
        let jit = cfg.jitter_cells * r;
        let mut out = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let seq = &data[self.order[self.cursor]];
            self.cursor += 1;
            let t = sample_triplet(seq, cfg.max_gap, &mut self.rng)?;
            let mut j = [(0.0, 0.0); 2];
            if jit > 0.0 {
                for v in j.iter_mut() {
                    *v = (self.rng.gen_range(-jit..=jit), self.rng.gen_range(-jit..=jit));
                }
            }
            out.push((t, j));
        }
        Ok(out)
    }
}

/// Fresh parameters for `config`; the stream is independent of the batch
/// sampler seeded with the same value.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::init(config, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x1a17_0000_0000_0007))
}

/// Full training run; `on_step` sees every record as it is produced.
pub fn train(model: &mut Model, data: &[SyntheticSequence], cfg: &TrainConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let w = LossWeights::from(cfg);
    let mut opt = OptimState::new(model, cfg.momentum, cfg.schedule);
    opt.grad_clip = cfg.grad_clip;
    let mut sampler = BatchSampler::new(cfg.seed, data.len());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        opt.frozen = if step < cfg.freeze_backbone_steps {
            vec!["backbone.".into()]
        } else {
            Vec::new()
        };
        let batch = sampler.next_batch(data, cfg)?;
        let rec = train_step(model, &mut opt, &batch, cfg.uses_label_peaks(step), &w)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// `step,L_cls,L_off,L_size,L_arm,L,lr`.
pub fn write_loss_csv(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "L_cls", "L_off", "L_size", "L_arm", "L", "lr"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            format!("{:.9}", r.loss.cls),
            format!("{:.9}", r.loss.off),
            format!("{:.9}", r.loss.size),
            format!("{:.9}", r.loss.arm),
            format!("{:.9}", r.loss.total),
            format!("{:.9}", r.lr),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
