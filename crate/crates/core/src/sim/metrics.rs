//! Overlap, center error and the failure/re-initialization protocol.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::FrameInput;
use crate::head::BoundingBox;

use super::scenario::SyntheticSequence;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = ((a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0)).max(0.0);
    let iy = ((a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Consecutive zero-overlap frames that count as one failure.
pub const FAILURE_RUN: usize = 5;
/// Frames skipped after a failure before re-initializing from groundtruth.
pub const REINIT_DELAY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStatus {
    /// Initialized (or re-initialized) from groundtruth; not scored.
    Init,
    Tracked,
    /// Waiting for re-initialization after a failure.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub status: FrameStatus,
    pub iou: f64,
    /// In cells.
    pub center_err: f64,
    pub k_hat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: u64,
    pub frames: usize,
    pub mean_iou: f64,
    pub mean_center_err: f64,
    pub failures: usize,
    #[serde(skip)]
    pub records: Vec<FrameRecord>,
}

/// Anything that can be started from a box and asked for one box per frame.
pub trait SequenceTracker {
    fn start(&mut self, frame: &FrameInput, b: &BoundingBox) -> Result<()>;
    /// Box for `frame` and the winning temporal candidate (1 when unused).
    fn advance(&mut self, frame: &FrameInput) -> Result<(BoundingBox, usize)>;
}

/// Runs `tracker` over `seq` with the failure and re-initialization rule.
pub fn evaluate<T: SequenceTracker>(tracker: &mut T, seq: &SyntheticSequence) -> Result<Metrics> {
    let n = seq.len();
    let stride = seq.config.stride as f64;
    let mut records = Vec::with_capacity(n);
    let mut zero_run = 0;
    let mut reinit_at = Some(0usize);
    for t in 0..n {
        let gt = &seq.boxes[t];
        if let Some(r) = reinit_at {
            if t < r {
                records.push(FrameRecord {
                    frame: t,
                    status: FrameStatus::Skipped,
                    iou: 0.0,
                    center_err: 0.0,
                    k_hat: 1,
                });
                continue;
            }
            tracker.start(&seq.frames[t], gt)?;
            reinit_at = None;
            zero_run = 0;
            records.push(FrameRecord {
                frame: t,
                status: FrameStatus::Init,
                iou: 1.0,
                center_err: 0.0,
                k_hat: 1,
            });
            continue;
        }
        let (b, k_hat) = tracker.advance(&seq.frames[t])?;
        let o = iou(&b, gt);
        let err = ((b.cx - gt.cx).powi(2) + (b.cy - gt.cy).powi(2)).sqrt() / stride;
        records.push(FrameRecord {
            frame: t,
            status: FrameStatus::Tracked,
            iou: o,
            center_err: err,
            k_hat,
        });
        zero_run = if o == 0.0 { zero_run + 1 } else { 0 };
        if zero_run == FAILURE_RUN {
            reinit_at = Some(t + REINIT_DELAY);
        }
    }
    Ok(summarize(seq.config.seed, records))
}

pub fn summarize(scenario: u64, records: Vec<FrameRecord>) -> Metrics {
    let tracked: Vec<&FrameRecord> = records.iter().filter(|r| r.status == FrameStatus::Tracked).collect();
    let denom = tracked.len().max(1) as f64;
    Metrics {
        scenario,
        frames: records.len(),
        mean_iou: tracked.iter().map(|r| r.iou).sum::<f64>() / denom,
        mean_center_err: tracked.iter().map(|r| r.center_err).sum::<f64>() / denom,
        failures: failures_from_records(&records),
        records,
    }
}

/// Recounts failures from per-frame records alone.
pub fn failures_from_records(records: &[FrameRecord]) -> usize {
    let mut failures = 0;
    let mut run = 0;
    for r in records {
        match r.status {
            FrameStatus::Tracked if r.iou == 0.0 => {
                run += 1;
                if run == FAILURE_RUN {
                    failures += 1;
                }
            }
            _ => run = 0,
        }
    }
    failures
}

/// Reports the groundtruth box of each frame.
pub struct OracleTracker<'a> {
    pub boxes: &'a [BoundingBox],
}

impl SequenceTracker for OracleTracker<'_> {
    fn start(&mut self, _: &FrameInput, _: &BoundingBox) -> Result<()> {
        Ok(())
    }

    fn advance(&mut self, frame: &FrameInput) -> Result<(BoundingBox, usize)> {
        Ok((self.boxes[frame.index], 1))
    }
}

/// Emits a box at a seeded random location each frame.
pub struct RandomTracker {
    pub rng: rand_chacha::ChaCha8Rng,
    pub extent: f64,
    pub side: f64,
}

impl SequenceTracker for RandomTracker {
    fn start(&mut self, _: &FrameInput, _: &BoundingBox) -> Result<()> {
        Ok(())
    }

    fn advance(&mut self, _: &FrameInput) -> Result<(BoundingBox, usize)> {
        use rand::Rng;
        let (x, y) = (self.rng.gen_range(0.0..self.extent), self.rng.gen_range(0.0..self.extent));
        Ok((BoundingBox::new(x, y, self.side, self.side), 1))
    }
}
