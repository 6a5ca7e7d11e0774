//! Temporal consistency between response maps of two frames: a symmetric KL
//! objective over peak-aligned, fused heatmaps for training, and candidate
//! scoring plus heatmap reweighting for online tracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{circular_shift, circular_shift_backward, normalize_distribution, normalize_distribution_backward, topk_local_peaks};
use crate::tensor::{PeakLocation, Tensor2};

/// Floor used when turning maps into distributions.
pub const KL_EPS: f64 = 1e-8;

fn same(a: &Tensor2, b: &Tensor2, op: &'static str) -> Result<()> {
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

/// `sum y (log y - log x)` after normalizing both maps.
pub fn kl_divergence(y: &Tensor2, x: &Tensor2, eps: f64) -> Result<f64> {
    same(y, x, "kl_divergence")?;
    let ny = normalize_distribution(y, eps);
    let nx = normalize_distribution(x, eps);
    Ok(ny.data().iter().zip(nx.data()).map(|(&a, &b)| a * (a.ln() - b.ln())).sum())
}

/// [`kl_divergence`] and its cotangent with respect to the raw `x`.
pub fn kl_divergence_with_grad(y: &Tensor2, x: &Tensor2, eps: f64) -> Result<(f64, Tensor2)> {
    same(y, x, "kl_divergence")?;
    let ny = normalize_distribution(y, eps);
    let nx = normalize_distribution(x, eps);
    let kl = ny.data().iter().zip(nx.data()).map(|(&a, &b)| a * (a.ln() - b.ln())).sum();
    let g_nx = ny.zip_map(&nx, |a, b| -a / b)?;
    Ok((kl, normalize_distribution_backward(x, eps, &g_nx)?))
}

/// Displacement that moves `from` onto `to`.
pub fn displacement(from: &PeakLocation, to: &PeakLocation) -> (isize, isize) {
    (to.y as isize - from.y as isize, to.x as isize - from.x as isize)
}

/// Heatmaps and labels of two frames of one sequence, with their peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPair {
    pub pred_i: Tensor2,
    pub pred_k: Tensor2,
    pub label_i: Tensor2,
    pub label_k: Tensor2,
    pub p: PeakLocation,
    pub q: PeakLocation,
    pub gap: usize,
}

impl ArmPair {
    /// Peaks taken from the predicted heatmaps.
    pub fn new(pred_i: Tensor2, pred_k: Tensor2, label_i: Tensor2, label_k: Tensor2, gap: usize) -> Result<Self> {
        let (p, q) = (pred_i.argmax(), pred_k.argmax());
        Self::with_peaks(pred_i, pred_k, label_i, label_k, p, q, gap)
    }

    /// Peaks taken from the labels, for when predictions are still unreliable.
    pub fn from_label_peaks(pred_i: Tensor2, pred_k: Tensor2, label_i: Tensor2, label_k: Tensor2, gap: usize) -> Result<Self> {
        let (p, q) = (label_i.argmax(), label_k.argmax());
        Self::with_peaks(pred_i, pred_k, label_i, label_k, p, q, gap)
    }

    pub fn with_peaks(
        pred_i: Tensor2,
        pred_k: Tensor2,
        label_i: Tensor2,
        label_k: Tensor2,
        p: PeakLocation,
        q: PeakLocation,
        gap: usize,
    ) -> Result<Self> {
        for m in [&pred_k, &label_i, &label_k] {
            same(&pred_i, m, "arm_pair")?;
        }
        if gap == 0 {
            return Err(Error::invalid("arm_pair", "frame gap must be positive"));
        }
        Ok(ArmPair {
            pred_i,
            pred_k,
            label_i,
            label_k,
            p,
            q,
            gap,
        })
    }

    /// The same pair with the roles of the two frames exchanged.
    pub fn swapped(&self) -> Self {
        ArmPair {
            pred_i: self.pred_k.clone(),
            pred_k: self.pred_i.clone(),
            label_i: self.label_k.clone(),
            label_k: self.label_i.clone(),
            p: self.q,
            q: self.p,
            gap: self.gap,
        }
    }
}

fn squared(m: &Tensor2) -> Tensor2 {
    m.map(|v| v * v)
}

/// One direction: `KL(N(label_b^2), N(shift(pred_a, a->b) * pred_b))`.
/// Returns the value and the cotangents for `pred_a` and `pred_b`.
fn directed_term(pred_a: &Tensor2, pred_b: &Tensor2, label_b: &Tensor2, a: &PeakLocation, b: &PeakLocation) -> Result<(f64, Tensor2, Tensor2)> {
    let (dy, dx) = displacement(a, b);
    let shifted = circular_shift(pred_a, dy, dx);
    let fused = shifted.zip_map(pred_b, |s, v| s * v)?;
    let (kl, g_fused) = kl_divergence_with_grad(&squared(label_b), &fused, KL_EPS)?;
    let g_b = g_fused.zip_map(&shifted, |g, s| g * s)?;
    let g_shifted = g_fused.zip_map(pred_b, |g, v| g * v)?;
    Ok((kl, circular_shift_backward(&g_shifted, dy, dx), g_b))
}

pub fn arm_loss(pair: &ArmPair) -> Result<f64> {
    arm_loss_with_grad(pair).map(|(l, _, _)| l)
}

/// Symmetric loss and its cotangents with respect to `pred_i` and `pred_k`.
/// Peaks are treated as constants.
pub fn arm_loss_with_grad(pair: &ArmPair) -> Result<(f64, Tensor2, Tensor2)> {
    let (l1, gi1, gk1) = directed_term(&pair.pred_i, &pair.pred_k, &pair.label_k, &pair.p, &pair.q)?;
    let (l2, gk2, gi2) = directed_term(&pair.pred_k, &pair.pred_i, &pair.label_i, &pair.q, &pair.p)?;
    let gi = gi1.zip_map(&gi2, |a, b| a + b)?;
    let gk = gk1.zip_map(&gk2, |a, b| a + b)?;
    Ok((l1 + l2, gi, gk))
}

/// `base + lambda_arm * arm`.
pub fn total_loss(base: f64, arm: f64, lambda_arm: f64) -> Result<f64> {
    if !(lambda_arm >= 0.0) {
        return Err(Error::invalid("total_loss", format!("lambda_arm = {lambda_arm} must be non-negative")));
    }
    Ok(base + lambda_arm * arm)
}

/// What the online tracker remembers from the last trusted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmMemory {
    pub label_last: Tensor2,
    pub pred_last: Tensor2,
    pub p_last: PeakLocation,
}

impl ArmMemory {
    pub fn new(label_last: Tensor2, pred_last: Tensor2, p_last: PeakLocation) -> Result<Self> {
        same(&label_last, &pred_last, "arm_memory")?;
        if p_last.y >= label_last.h() || p_last.x >= label_last.w() {
            return Err(Error::invalid("arm_memory", "peak outside the map"));
        }
        Ok(ArmMemory {
            label_last,
            pred_last,
            p_last,
        })
    }

    /// Both remembered maps moved so the remembered peak lands on `q`.
    pub fn aligned_to(&self, q: &PeakLocation) -> (Tensor2, Tensor2) {
        let (dy, dx) = displacement(&self.p_last, q);
        (circular_shift(&self.label_last, dy, dx), circular_shift(&self.pred_last, dy, dx))
    }

    /// Re-anchors the memory on `q`.
    pub fn advance(&mut self, q: &PeakLocation) {
        let (label, pred) = self.aligned_to(q);
        self.label_last = label;
        self.pred_last = pred;
        self.p_last = PeakLocation::new(q.y, q.x, q.score);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmCandidateScore {
    pub q: PeakLocation,
    pub score: f64,
}

/// Scores the `k` strongest local peaks of `pred` against the memory and
/// returns the 1-based index of the lowest score (ties keep the earlier
/// candidate) together with every score.
pub fn arm_select(pred: &Tensor2, memory: &ArmMemory, k: usize) -> Result<(usize, Vec<ArmCandidateScore>)> {
    same(pred, &memory.pred_last, "arm_select")?;
    let candidates = topk_local_peaks(pred, k)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for q in candidates {
        let (label, prev) = memory.aligned_to(&q);
        let fused = prev.zip_map(pred, |a, b| a * b)?;
        let score = kl_divergence(&squared(&label), &fused, KL_EPS)?;
        scores.push(ArmCandidateScore { q, score });
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.score < scores[best].score {
            best = i;
        }
    }
    Ok((best + 1, scores))
}

/// `(1 + shift(pred_last, p_last -> q)) * pred`.
pub fn arm_reweight(pred: &Tensor2, memory: &ArmMemory, q: &PeakLocation) -> Result<Tensor2> {
    let (_, prev) = memory.aligned_to(q);
    prev.zip_map(pred, |a, b| (1.0 + a) * b)
}
