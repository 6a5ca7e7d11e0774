//! Tracking loop behavior on synthetic and hand-built sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stmatch::features::FrameInput;
use stmatch::head::HeadParams;
use stmatch::io;
use stmatch::model::{Matcher, MatcherKind, Model, ModelConfig};
use stmatch::sim::{gen_sequence, ScenarioConfig, ScenarioFamily};
use stmatch::tracker::{init, step, track_sequence, RefreshPolicy, StepOutput, TrackConfig};
use stmatch::{BoundingBox, KernelBank, Tensor3};

const C: usize = 16;
const STRIDE: f64 = 8.0;

/// Depth-wise matching with a head that sums the rectified per-channel
/// responses: the heatmap peaks wherever the template's channel pattern
/// matches, and sizes are fixed at two cells.
fn matched_filter() -> Model {
    let mut trunk = KernelBank::zeros(C, C, 3, 3);
    for c in 0..C {
        let i = trunk.weight_index(c, c, 1, 1);
        trunk.weights[i] = 1.0;
    }
    let mut center = KernelBank::zeros(1, C, 1, 1);
    center.weights.iter_mut().for_each(|w| *w = 2.0);
    center.bias[0] = -4.0;
    let mut size = KernelBank::zeros(2, C, 1, 1);
    size.bias = vec![2f64.ln(); 2];
    Model {
        config: ModelConfig {
            matcher: MatcherKind::Dw,
            ..ModelConfig::default()
        },
        backbone: None,
        matcher: Matcher::DwXCorr,
        head: HeadParams {
            trunk,
            center,
            offset: KernelBank::zeros(2, C, 1, 1),
            size,
        },
    }
}

fn signature() -> Vec<f64> {
    let mut s = vec![0.0; C];
    for (i, c) in [1usize, 4, 6, 9, 12, 14].iter().enumerate() {
        s[*c] = 1.0 + 0.1 * i as f64;
    }
    let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    s.iter().map(|v| v / n).collect()
}

/// Isotropic blobs `(cy, cx, sigma, amplitude)` in cells on a 32x32 grid.
fn frame(index: usize, blobs: &[(f64, f64, f64, f64)]) -> FrameInput {
    let sig = signature();
    FrameInput::features(
        index,
        Tensor3::from_fn(32, 32, C, |y, x, c| {
            blobs
                .iter()
                .map(|&(cy, cx, s, a)| a * (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * s * s)).exp())
                .sum::<f64>()
                * sig[c]
        }),
    )
}

fn cell_dist(b: &BoundingBox, gt: &BoundingBox) -> f64 {
    ((b.cx - gt.cx).powi(2) + (b.cy - gt.cy).powi(2)).sqrt() / STRIDE
}

#[test]
fn static_target_stays_within_one_cell() {
    let model = matched_filter();
    let mut cfg = ScenarioConfig::basic(0);
    cfg.frames = 11;
    let seq = gen_sequence(&cfg).unwrap();
    for arm in [false, true] {
        let out = track_sequence(&seq.frames, &seq.boxes[0], &model, &TrackConfig { arm, ..Default::default() }).unwrap();
        assert_eq!(out.len(), 10);
        for (o, gt) in out.iter().zip(&seq.boxes[1..]) {
            assert!(cell_dist(&o.bbox, gt) <= 1.0, "frame {} off by {:.2} cells", o.frame, cell_dist(&o.bbox, gt));
        }
    }
}

/// Target fixed at cell (16, 16); a copy of its pattern twice as wide, and
/// so with a taller response, parks five cells to the right from frame 3 on.
fn distractor_sequence() -> (Vec<FrameInput>, BoundingBox) {
    let target = (16.0, 16.0, 1.0, 1.0);
    let frames = (0..12)
        .map(|t| if t < 3 { frame(t, &[target]) } else { frame(t, &[target, (16.0, 21.0, 2.0, 1.0)]) })
        .collect();
    (frames, BoundingBox::new(16.0 * STRIDE, 16.0 * STRIDE, 16.0, 16.0))
}

#[test]
fn temporal_selection_holds_the_target_against_a_distractor() {
    let model = matched_filter();
    let (frames, gt) = distractor_sequence();
    // no window or scale prior, so only the temporal module can hold the target
    let cfg = TrackConfig {
        window_influence: 0.0,
        penalty_k: 0.0,
        ..Default::default()
    };
    let with = track_sequence(&frames, &gt, &model, &cfg).unwrap();
    let without = track_sequence(&frames, &gt, &model, &TrackConfig { arm: false, ..cfg }).unwrap();
    assert!(with.iter().all(|o| cell_dist(&o.bbox, &gt) <= 1.0), "{:?}", centers(&with));
    assert!(with[2..].iter().any(|o| o.k_hat != 1), "selection never switched");
    let jumped = without.iter().filter(|o| cell_dist(&o.bbox, &gt) >= 3.0).count();
    assert!(jumped > 0, "{:?}", centers(&without));
}

fn centers(out: &[StepOutput]) -> Vec<(f64, f64)> {
    out.iter().map(|o| (o.bbox.cx / STRIDE, o.bbox.cy / STRIDE)).collect()
}

#[test]
fn single_candidate_equals_disabled_selection_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fam = ScenarioFamily {
        frames: 30,
        ..Default::default()
    };
    let seq = gen_sequence(&fam.sample(3)).unwrap();
    for matcher in [MatcherKind::Dw, MatcherKind::Svc] {
        let model = Model::init(ModelConfig { matcher, ..Default::default() }, &mut rng).unwrap();
        let one = track_sequence(&seq.frames, &seq.boxes[0], &model, &TrackConfig { k: 1, ..Default::default() }).unwrap();
        let off = track_sequence(&seq.frames, &seq.boxes[0], &model, &TrackConfig { arm: false, ..Default::default() }).unwrap();
        for (a, b) in one.iter().zip(&off) {
            assert_eq!(a.k_hat, 1);
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.heatmap, b.heatmap);
            assert_eq!(a.confidence.to_bits(), b.confidence.to_bits());
        }
    }
}

#[test]
fn literal_policy_keeps_memory_until_a_switch() {
    let model = matched_filter();
    let mut cfg = ScenarioConfig::basic(1);
    cfg.frames = 10;
    let seq = gen_sequence(&cfg).unwrap();
    let tc = TrackConfig::default();
    let first = init(&seq.frames[0], &seq.boxes[0], &model, &tc).unwrap();
    let mut state = first.clone();
    for f in &seq.frames[1..] {
        let (o, next) = step(&state, f, &model, &tc).unwrap();
        assert_eq!(o.k_hat, 1);
        state = next;
    }
    assert_eq!(state.memory, first.memory);
    assert_eq!(state.memory.label_last.data(), first.memory.label_last.data());

    // the every-frame policy rewrites the memory from each prediction
    let always = TrackConfig {
        refresh: RefreshPolicy::Always,
        ..tc
    };
    let moved = frame(1, &[(16.0, 17.0, 1.0, 1.0)]);
    let (_, next) = step(&first, &moved, &model, &always).unwrap();
    assert_ne!(next.memory.pred_last, first.memory.pred_last);
    assert_ne!(next.memory.p_last, first.memory.p_last);
}

#[test]
fn init_memory_is_the_label_of_the_initial_box() {
    let model = matched_filter();
    let seq = gen_sequence(&ScenarioConfig::basic(2)).unwrap();
    let s = init(&seq.frames[0], &seq.boxes[0], &model, &TrackConfig::default()).unwrap();
    let p = s.memory.label_last.argmax();
    assert_eq!((s.memory.p_last.y, s.memory.p_last.x), (p.y, p.x));
    assert_eq!(s.memory.label_last.get(p.y, p.x), 1.0);
    assert!(init(&seq.frames[0], &BoundingBox::new(10.0, 10.0, 0.0, 4.0), &model, &TrackConfig::default()).is_err());
}

#[test]
fn stepping_is_a_pure_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::init(ModelConfig::default(), &mut rng).unwrap();
    let fam = ScenarioFamily {
        frames: 25,
        ..Default::default()
    };
    let seq = gen_sequence(&fam.sample(8)).unwrap();
    for refresh in [RefreshPolicy::Literal, RefreshPolicy::Always] {
        let cfg = TrackConfig { refresh, ..Default::default() };
        let a = track_sequence(&seq.frames, &seq.boxes[0], &model, &cfg).unwrap();
        let b = track_sequence(&seq.frames, &seq.boxes[0], &model, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|o| o.bbox.w > 0.0 && o.bbox.h > 0.0));
    }
}

#[test]
fn golden_tracking_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = Model::init(ModelConfig::default(), &mut rng).unwrap();
    let fam = ScenarioFamily {
        frames: 12,
        ..Default::default()
    };
    let seq = gen_sequence(&fam.sample(77)).unwrap();
    let out = track_sequence(&seq.frames, &seq.boxes[0], &model, &TrackConfig::default()).unwrap();
    let rows = Tensor3::from_fn(out.len(), 6, 1, |i, j, _| {
        let o = &out[i];
        [o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h, o.confidence, o.k_hat as f64][j]
    });
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tracker_golden.st1");
    if std::env::var_os("STMATCH_BLESS").is_some() {
        io::write_st1(path, &rows).unwrap();
    }
    let golden = io::read_st1(path).unwrap();
    assert_eq!(golden.shape(), rows.shape());
    assert!(golden.data().iter().zip(rows.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
