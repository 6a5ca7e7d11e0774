//! Seeded synthetic sequences: a target blob with a channel signature,
//! same-shaped distractors whose signatures partly overlap the target's,
//! scripted motion, occlusion and additive noise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrameInput;
use crate::head::BoundingBox;
use crate::io;
use crate::tensor::Tensor3;

/// Target trajectory, in cells per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionModel {
    Static,
    Linear { vx: f64, vy: f64 },
    RandomWalk { sigma: f64 },
    AbruptJump { frame: usize, dx: f64, dy: f64 },
}

/// Half-open frame range `[start, end)` during which the target is hidden.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub start: usize,
    pub end: usize,
}

/// One distractor: passes the target's position of frame `cross_frame` at
/// offset `(miss_x, miss_y)` with constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorPath {
    pub cross_frame: usize,
    pub miss_x: f64,
    pub miss_y: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub frames: usize,
    /// Square grid side, in cells.
    pub grid: usize,
    pub channels: usize,
    /// Pixels per cell.
    pub stride: usize,
    /// Target box side, in cells.
    pub target_cells: f64,
    /// Unit-norm channel signature of the target.
    pub target_signature: Vec<f64>,
    pub target_amplitude: f64,
    /// Start position of the target center, in cells.
    pub start: (f64, f64),
    pub motion: MotionModel,
    pub distractors: Vec<DistractorPath>,
    /// Share of the target's active channels each distractor reuses.
    pub overlap: f64,
    /// Distractor amplitude relative to the target.
    pub distractor_gain: f64,
    pub occlusions: Vec<Occlusion>,
    pub noise: f64,
    /// Render grayscale pixels instead of a feature map.
    pub pixel_mode: bool,
    pub seed: u64,
}

impl ScenarioConfig {
    /// A single static target in the middle of a clean grid.
    pub fn basic(seed: u64) -> Self {
        let channels = 16;
        let mut sig = vec![0.0; channels];
        for (i, c) in [1usize, 4, 6, 9, 12, 14].iter().enumerate() {
            sig[*c] = 1.0 + 0.1 * i as f64;
        }
        normalize(&mut sig);
        ScenarioConfig {
            frames: 20,
            grid: 32,
            channels,
            stride: 8,
            target_cells: 2.0,
            target_signature: sig,
            target_amplitude: 1.0,
            start: (16.0, 16.0),
            motion: MotionModel::Static,
            distractors: Vec::new(),
            overlap: 0.5,
            distractor_gain: 1.4,
            occlusions: Vec::new(),
            noise: 0.0,
            pixel_mode: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("scenario", msg));
        if self.frames < 2 {
            return bad(format!("{} frames; need at least 2", self.frames));
        }
        if self.channels == 0 || self.target_signature.len() != self.channels {
            return bad(format!(
                "signature has {} entries for {} channels",
                self.target_signature.len(),
                self.channels
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if self.occlusions.iter().any(|o| o.start >= o.end || o.end > self.frames || o.start == 0) {
            return bad("occlusion windows must be non-empty, start after frame 0 and end within the sequence".into());
        }
        if !(self.target_cells > 0.0) || self.noise < 0.0 || self.stride == 0 {
            return bad("target size, noise and stride must be positive".into());
        }
        // every blob needs a footprint of roughly four box sides
        let footprint = (4.0 * self.target_cells).powi(2);
        if (self.distractors.len() + 1) as f64 * footprint > (self.grid * self.grid) as f64 {
            return bad(format!(
                "{} blobs of {} cells do not fit a {}-cell grid",
                self.distractors.len() + 1,
                self.target_cells,
                self.grid
            ));
        }
        let active = self.target_signature.iter().filter(|&&v| v != 0.0).count();
        let shared = (self.overlap * active as f64).round() as usize;
        if active - shared > self.channels - active && !self.distractors.is_empty() {
            return bad("not enough spare channels for the distractor signature".into());
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Distractor signature: the first `round(overlap * m)` of the target's
/// active channels keep their weights, the rest move to unused channels.
pub fn distractor_signature(target: &[f64], overlap: f64, rng: &mut impl Rng) -> Vec<f64> {
    let active: Vec<usize> = (0..target.len()).filter(|&c| target[c] != 0.0).collect();
    let mut spare: Vec<usize> = (0..target.len()).filter(|&c| target[c] == 0.0).collect();
    spare.shuffle(rng);
    let shared = (overlap * active.len() as f64).round() as usize;
    let mut sig = vec![0.0; target.len()];
    for &c in &active[..shared] {
        sig[c] = target[c];
    }
    for (i, &c) in active[shared..].iter().enumerate() {
        sig[spare[i]] = target[c];
    }
    normalize(&mut sig);
    sig
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Occluded { start: usize, end: usize },
    Jump { frame: usize },
    Crossing { frame: usize, distractor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub config: ScenarioConfig,
    pub frames: Vec<FrameInput>,
    /// Groundtruth per frame, in pixels.
    pub boxes: Vec<BoundingBox>,
    pub events: Vec<Event>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let mut u = (v - lo).rem_euclid(2.0 * span);
    if u > span {
        u = 2.0 * span - u;
    }
    lo + u
}

/// Target centers per frame, in cells.
fn target_track(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let margin = cfg.target_cells + 1.0;
    let (lo, hi) = (margin, cfg.grid as f64 - margin);
    let walk = match cfg.motion {
        MotionModel::RandomWalk { sigma } => Some(Normal::new(0.0, sigma).map_err(|e| Error::invalid("scenario", e.to_string()))?),
        _ => None,
    };
    let mut pos = cfg.start;
    let mut out = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            match cfg.motion {
                MotionModel::Static => {}
                MotionModel::Linear { vx, vy } => {
                    pos.0 += vx;
                    pos.1 += vy;
                }
                MotionModel::RandomWalk { .. } => {
                    let n = walk.as_ref().expect("random walk distribution");
                    pos.0 += n.sample(rng);
                    pos.1 += n.sample(rng);
                }
                MotionModel::AbruptJump { frame, dx, dy } => {
                    if t == frame {
                        pos.0 += dx;
                        pos.1 += dy;
                    }
                }
            }
            pos = (reflect(pos.0, lo, hi), reflect(pos.1, lo, hi));
        }
        out.push(pos);
    }
    Ok(out)
}

fn add_blob(t: &mut Tensor3, cx: f64, cy: f64, sigma: f64, sig: &[f64], amp: f64) {
    let reach = (3.5 * sigma).ceil() as isize + 1;
    let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
    let denom = 2.0 * sigma * sigma;
    for y in (y0 - reach).max(0)..(y0 + reach + 1).min(t.h() as isize) {
        for x in (x0 - reach).max(0)..(x0 + reach + 1).min(t.w() as isize) {
            let d = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            let g = amp * (-d / denom).exp();
            for (v, &s) in t.pixel_mut(y as usize, x as usize).iter_mut().zip(sig) {
                *v += g * s;
            }
        }
    }
}

/// Grayscale blob modulated by a grating whose orientation and frequency
/// follow the signature, so distinct signatures give distinct textures.
fn add_textured_blob(t: &mut Tensor3, cx: f64, cy: f64, sigma: f64, sig: &[f64], amp: f64) {
    let mut theta = 0.0;
    let mut freq = 0.0;
    for (c, &s) in sig.iter().enumerate() {
        theta += s * c as f64;
        freq += s * s * (1.0 + (c % 4) as f64);
    }
    let (kx, ky) = (theta.cos() * freq * 0.35, theta.sin() * freq * 0.35);
    let reach = (3.5 * sigma).ceil() as isize + 1;
    let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
    let denom = 2.0 * sigma * sigma;
    for y in (y0 - reach).max(0)..(y0 + reach + 1).min(t.h() as isize) {
        for x in (x0 - reach).max(0)..(x0 + reach + 1).min(t.w() as isize) {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let g = amp * (-(px * px + py * py) / denom).exp();
            let v = t.pixel_mut(y as usize, x as usize);
            v[0] += g * (0.6 + 0.4 * (kx * px + ky * py + PI / 4.0).cos());
        }
    }
}

pub fn gen_sequence(cfg: &ScenarioConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let track = target_track(cfg, &mut rng)?;
    let dsigs: Vec<Vec<f64>> = cfg
        .distractors
        .iter()
        .map(|_| distractor_signature(&cfg.target_signature, cfg.overlap, &mut rng))
        .collect();
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid("scenario", e.to_string()))?;
    let blob_sigma = cfg.target_cells / 3.0;
    let r = cfg.stride as f64;

    let mut events = Vec::new();
    for o in &cfg.occlusions {
        events.push(Event::Occluded { start: o.start, end: o.end });
    }
    if let MotionModel::AbruptJump { frame, .. } = cfg.motion {
        if frame < cfg.frames {
            events.push(Event::Jump { frame });
        }
    }
    for (i, d) in cfg.distractors.iter().enumerate() {
        if d.cross_frame < cfg.frames {
            events.push(Event::Crossing {
                frame: d.cross_frame,
                distractor: i,
            });
        }
    }

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for (t, &(cx, cy)) in track.iter().enumerate() {
        let occluded = cfg.occlusions.iter().any(|o| (o.start..o.end).contains(&t));
        let amp = if occluded { 0.0 } else { cfg.target_amplitude };
        let damp = cfg.target_amplitude * cfg.distractor_gain;
        let positions: Vec<(f64, f64)> = cfg
            .distractors
            .iter()
            .map(|d| {
                let (ax, ay) = track[d.cross_frame.min(cfg.frames - 1)];
                let dt = t as f64 - d.cross_frame as f64;
                (ax + d.miss_x + d.vx * dt, ay + d.miss_y + d.vy * dt)
            })
            .collect();
        let tensor = if cfg.pixel_mode {
            let n = cfg.grid * cfg.stride;
            let mut img = Tensor3::zeros(n, n, 1);
            add_textured_blob(&mut img, cx * r, cy * r, blob_sigma * r, &cfg.target_signature, amp);
            for (p, sig) in positions.iter().zip(&dsigs) {
                add_textured_blob(&mut img, p.0 * r, p.1 * r, blob_sigma * r, sig, damp);
            }
            if cfg.noise > 0.0 {
                img.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            img
        } else {
            let mut f = Tensor3::zeros(cfg.grid, cfg.grid, cfg.channels);
            add_blob(&mut f, cx, cy, blob_sigma, &cfg.target_signature, amp);
            for (p, sig) in positions.iter().zip(&dsigs) {
                add_blob(&mut f, p.0, p.1, blob_sigma, sig, damp);
            }
            if cfg.noise > 0.0 {
                f.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            f
        };
        frames.push(if cfg.pixel_mode {
            FrameInput::pixels(t, tensor)
        } else {
            FrameInput::features(t, tensor)
        });
        let side = cfg.target_cells * r;
        boxes.push(BoundingBox::new(cx * r, cy * r, side, side));
    }
    Ok(SyntheticSequence {
        config: cfg.clone(),
        frames,
        boxes,
        events,
    })
}

/// Sampling ranges for a population of scenarios; one config per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioFamily {
    pub frames: usize,
    pub grid: usize,
    pub channels: usize,
    pub stride: usize,
    pub target_cells: f64,
    /// Inclusive range of active signature channels.
    pub active_channels: (usize, usize),
    pub amplitude: (f64, f64),
    /// Inclusive range of distractor counts.
    pub distractors: (usize, usize),
    pub overlap: (f64, f64),
    pub gain: (f64, f64),
    pub crossing_frames: (usize, usize),
    /// Closest approach between distractor and target centers, in cells.
    pub miss_distance: (f64, f64),
    /// Initial separation the distractor travels before crossing, in cells.
    pub approach_distance: (f64, f64),
    pub occlusion_probability: f64,
    pub occlusion_length: (usize, usize),
    pub noise: f64,
    pub pixel_mode: bool,
}

impl Default for ScenarioFamily {
    fn default() -> Self {
        ScenarioFamily {
            frames: 100,
            grid: 32,
            channels: 16,
            stride: 8,
            target_cells: 2.0,
            active_channels: (4, 8),
            amplitude: (0.8, 1.2),
            distractors: (1, 2),
            overlap: (0.25, 1.0),
            gain: (1.2, 1.6),
            crossing_frames: (20, 80),
            miss_distance: (0.0, 2.0),
            approach_distance: (10.0, 14.0),
            occlusion_probability: 0.3,
            occlusion_length: (2, 4),
            noise: 0.05,
            pixel_mode: false,
        }
    }
}

impl ScenarioFamily {
    pub fn sample(&self, seed: u64) -> ScenarioConfig {
        // scenario parameters and per-frame randomness use separate streams
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_cafe_0001);
        let (a_lo, a_hi) = self.active_channels;
        let m = rng.gen_range(a_lo.min(self.channels)..=a_hi.min(self.channels));
        let mut chans: Vec<usize> = (0..self.channels).collect();
        chans.shuffle(&mut rng);
        let mut sig = vec![0.0; self.channels];
        for &c in &chans[..m] {
            sig[c] = rng.gen_range(0.5..1.0);
        }
        normalize(&mut sig);

        let g = self.grid as f64;
        let start = (rng.gen_range(0.4 * g..0.6 * g), rng.gen_range(0.4 * g..0.6 * g));
        let motion = match rng.gen_range(0..4) {
            0 => MotionModel::Static,
            1 => {
                let a = rng.gen_range(0.0..2.0 * PI);
                let s = rng.gen_range(0.05..0.25);
                MotionModel::Linear {
                    vx: s * a.cos(),
                    vy: s * a.sin(),
                }
            }
            2 => MotionModel::RandomWalk {
                sigma: rng.gen_range(0.1..0.3),
            },
            _ => {
                let a = rng.gen_range(0.0..2.0 * PI);
                let d = rng.gen_range(2.0..4.0);
                MotionModel::AbruptJump {
                    frame: rng.gen_range(self.frames / 4..(3 * self.frames / 4).max(self.frames / 4 + 1)),
                    dx: d * a.cos(),
                    dy: d * a.sin(),
                }
            }
        };
        let nd = rng.gen_range(self.distractors.0..=self.distractors.1);
        let lo_cross = self.crossing_frames.0.min(self.frames.saturating_sub(1)).max(1);
        let hi_cross = self.crossing_frames.1.min(self.frames.saturating_sub(1)).max(lo_cross);
        let distractors = (0..nd)
            .map(|_| {
                let cross_frame = rng.gen_range(lo_cross..=hi_cross);
                let miss_a = rng.gen_range(0.0..2.0 * PI);
                let miss = rng.gen_range(self.miss_distance.0..=self.miss_distance.1);
                let dir = rng.gen_range(0.0..2.0 * PI);
                let speed = rng.gen_range(self.approach_distance.0..=self.approach_distance.1) / cross_frame as f64;
                DistractorPath {
                    cross_frame,
                    miss_x: miss * miss_a.cos(),
                    miss_y: miss * miss_a.sin(),
                    vx: speed * dir.cos(),
                    vy: speed * dir.sin(),
                }
            })
            .collect();
        let overlap = rng.gen_range(self.overlap.0..=self.overlap.1);
        let distractor_gain = rng.gen_range(self.gain.0..=self.gain.1);
        let target_amplitude = rng.gen_range(self.amplitude.0..=self.amplitude.1);
        let mut occlusions = Vec::new();
        if rng.gen_bool(self.occlusion_probability.clamp(0.0, 1.0)) && self.frames > 10 {
            let len = rng.gen_range(self.occlusion_length.0..=self.occlusion_length.1);
            let start = rng.gen_range(5..self.frames - len - 1);
            occlusions.push(Occlusion { start, end: start + len });
        }
        ScenarioConfig {
            frames: self.frames,
            grid: self.grid,
            channels: self.channels,
            stride: self.stride,
            target_cells: self.target_cells,
            target_signature: sig,
            target_amplitude,
            start,
            motion,
            distractors,
            overlap,
            distractor_gain,
            occlusions,
            noise: self.noise,
            pixel_mode: self.pixel_mode,
            seed,
        }
    }
}

/// On-disk sequence: config echo, groundtruth and ST1 frame files relative to
/// the descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceDescriptor {
    pub config: ScenarioConfig,
    pub frames: Vec<String>,
    pub boxes: Vec<BoundingBox>,
    pub events: Vec<Event>,
}

/// Writes `dir/<name>.json` plus `dir/<name>/frame_NNNN.st1`.
pub fn write_sequence(seq: &SyntheticSequence, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let fdir = dir.join(name);
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let mut files = Vec::with_capacity(seq.len());
    for f in &seq.frames {
        let rel = format!("{name}/frame_{:04}.st1", f.index);
        io::write_st1(dir.join(&rel), f.tensor())?;
        files.push(rel);
    }
    let desc = SequenceDescriptor {
        config: seq.config.clone(),
        frames: files,
        boxes: seq.boxes.clone(),
        events: seq.events.clone(),
    };
    let path = dir.join(format!("{name}.json"));
    io::write_json(&path, &desc)?;
    Ok(path)
}

pub fn read_sequence(descriptor: impl AsRef<Path>) -> Result<SyntheticSequence> {
    let path = descriptor.as_ref();
    let desc: SequenceDescriptor = io::read_json(path)?;
    if desc.frames.len() != desc.boxes.len() {
        return Err(Error::Format {
            what: "sequence descriptor",
            msg: format!("{} frames but {} boxes", desc.frames.len(), desc.boxes.len()),
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let frames = desc
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let t = io::read_st1(base.join(f))?;
            Ok(if desc.config.pixel_mode {
                FrameInput::pixels(i, t)
            } else {
                FrameInput::features(i, t)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSequence {
        config: desc.config,
        frames,
        boxes: desc.boxes,
        events: desc.events,
    })
}

/// Reads every `*.json` descriptor in `dir`, sorted by file name.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SyntheticSequence>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "resolved_config.json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid("read_dataset", format!("no sequence descriptors in {}", dir.display())));
    }
    paths.iter().map(read_sequence).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_static_sequence_repeats_first_frame() {
        let s = gen_sequence(&ScenarioConfig::basic(3)).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.frames.iter().all(|f| f.tensor() == s.frames[0].tensor()));
        assert!(s.boxes.iter().all(|b| *b == s.boxes[0]));
        assert_eq!(s.boxes[0], BoundingBox::new(128.0, 128.0, 16.0, 16.0));
    }

    #[test]
    fn target_mass_follows_signature() {
        let s = gen_sequence(&ScenarioConfig::basic(3)).unwrap();
        let f = s.frames[0].tensor();
        let sig = &s.config.target_signature;
        for c in 0..16 {
            let mass: f64 = (0..32).flat_map(|y| (0..32).map(move |x| (y, x))).map(|(y, x)| f.get(y, x, c)).sum();
            assert_eq!(mass == 0.0, sig[c] == 0.0);
        }
    }

    #[test]
    fn full_overlap_copies_signature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fam = ScenarioFamily::default();
        let cfg = fam.sample(4);
        let d = distractor_signature(&cfg.target_signature, 1.0, &mut rng);
        assert!(d.iter().zip(&cfg.target_signature).all(|(a, b)| (a - b).abs() < 1e-15));
        let z = distractor_signature(&cfg.target_signature, 0.0, &mut rng);
        assert!(z.iter().zip(&cfg.target_signature).all(|(a, b)| *a == 0.0 || *b == 0.0));
        let norm: f64 = z.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let fam = ScenarioFamily::default();
        let a = gen_sequence(&fam.sample(11)).unwrap();
        let b = gen_sequence(&fam.sample(11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames[5], gen_sequence(&fam.sample(12)).unwrap().frames[5]);
    }

    #[test]
    fn family_respects_ranges() {
        let fam = ScenarioFamily::default();
        for seed in 0..50 {
            let c = fam.sample(seed);
            c.validate().unwrap();
            assert!((1..=2).contains(&c.distractors.len()));
            assert!((0.25..=1.0).contains(&c.overlap));
            let s = gen_sequence(&c).unwrap();
            let g = c.grid as f64 * c.stride as f64;
            assert!(s.boxes.iter().all(|b| b.cx > 0.0 && b.cx < g && b.cy > 0.0 && b.cy < g));
            // distractors start well away from the target
            for d in &c.distractors {
                let (ax, ay) = (d.miss_x - d.vx * d.cross_frame as f64, d.miss_y - d.vy * d.cross_frame as f64);
                let travel = (ax * ax + ay * ay).sqrt();
                assert!(travel >= 7.0, "seed {seed}: {travel}");
            }
        }
    }

    #[test]
    fn overcrowded_grid_rejected() {
        let mut c = ScenarioConfig::basic(0);
        c.grid = 10;
        c.distractors = vec![
            DistractorPath {
                cross_frame: 5,
                miss_x: 0.0,
                miss_y: 0.0,
                vx: 0.0,
                vy: 0.0,
            };
            3
        ];
        assert!(gen_sequence(&c).is_err());
        let mut o = ScenarioConfig::basic(0);
        o.overlap = 1.5;
        assert!(gen_sequence(&o).is_err());
    }

    #[test]
    fn occluded_frames_hide_the_target() {
        let mut c = ScenarioConfig::basic(0);
        c.occlusions = vec![Occlusion { start: 3, end: 5 }];
        let s = gen_sequence(&c).unwrap();
        assert!(s.frames[3].tensor().data().iter().all(|&v| v == 0.0));
        assert!(s.frames[5].tensor().data().iter().any(|&v| v > 0.0));
        assert_eq!(s.events, vec![Event::Occluded { start: 3, end: 5 }]);
    }

    #[test]
    fn descriptor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_sequence(&ScenarioFamily::default().sample(2)).unwrap();
        let p = write_sequence(&s, dir.path(), "seq_0002").unwrap();
        assert_eq!(read_sequence(&p).unwrap(), s);
        assert_eq!(read_dataset(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn pixel_mode_renders_grayscale() {
        let mut c = ScenarioConfig::basic(0);
        c.pixel_mode = true;
        c.frames = 2;
        let s = gen_sequence(&c).unwrap();
        let t = s.frames[0].tensor();
        assert_eq!((t.h(), t.w(), t.c()), (256, 256, 1));
        assert!(!s.frames[0].is_features());
        let center = t.get(128, 128, 0);
        assert!(center > t.get(10, 10, 0));
    }
}
