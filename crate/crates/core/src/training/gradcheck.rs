//! Central-difference checks of every hand-written adjoint.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{arm_loss_with_grad, ArmPair};
use crate::error::{Error, Result};
use crate::features::{backbone_backward, extract_with_cache, FrameInput};
use crate::head::{base_loss, base_loss_with_grad, head_backward, head_forward, head_forward_cached, make_labels, BoundingBox};
use crate::matching::{svc_corr, svc_corr_backward, svc_corr_forward};
use crate::model::{Matcher, MatcherKind, Model, ModelConfig};
use crate::tensor::{Tensor2, Tensor3};

use super::{pair_objective, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates drawn per group when a group is larger than this.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Quadratic,
    Svc,
    Head,
    Arm,
    Pipeline,
    Backbone,
}

impl Scope {
    pub const ALL: [Scope; 6] = [Scope::Quadratic, Scope::Svc, Scope::Head, Scope::Arm, Scope::Pipeline, Scope::Backbone];

    pub fn name(&self) -> &'static str {
        match self {
            Scope::Quadratic => "quadratic",
            Scope::Svc => "svc",
            Scope::Head => "head",
            Scope::Arm => "arm",
            Scope::Pipeline => "pipeline",
            Scope::Backbone => "backbone",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid("gradcheck", format!("unknown scope `{s}`")))
    }
}

/// Worst relative error over the checked coordinates of one parameter group
/// or input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub scope: String,
    pub group: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn pick(n: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= opts.max_coords {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, opts.max_coords).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks `analytic` against central differences of `f` around `x`.
pub fn check_vector(
    scope: &str,
    group: &str,
    x: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<GroupReport> {
    if x.len() != analytic.len() {
        return Err(Error::invalid("gradcheck", format!("{group}: {} values, {} gradients", x.len(), analytic.len())));
    }
    let coords = pick(x.len(), opts, rng);
    let mut buf = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in &coords {
        let orig = buf[i];
        buf[i] = orig + opts.step;
        let up = f(&buf)?;
        buf[i] = orig - opts.step;
        let down = f(&buf)?;
        buf[i] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let e = rel_err(analytic[i], numeric, opts.floor);
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck {scope}/{group} coordinate {i}")));
        }
        worst = worst.max(e);
    }
    Ok(GroupReport {
        scope: scope.into(),
        group: group.into(),
        checked: coords.len(),
        total: x.len(),
        max_rel_err: worst,
        passed: worst <= opts.tolerance,
    })
}

fn flatten(b: &crate::tensor::KernelBank) -> Vec<f64> {
    b.weights.iter().chain(&b.bias).copied().collect()
}

fn unflatten(b: &mut crate::tensor::KernelBank, v: &[f64]) {
    let n = b.weights.len();
    b.weights.copy_from_slice(&v[..n]);
    b.bias.copy_from_slice(&v[n..]);
}

/// One report per parameter group of `model` whose name passes `keep`.
fn check_model(
    scope: &str,
    model: &Model,
    analytic: &Model,
    loss: &dyn Fn(&Model) -> Result<f64>,
    keep: &dyn Fn(&str) -> bool,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupReport>> {
    let names: Vec<String> = model.banks().into_iter().map(|(n, _)| n).collect();
    let grads = analytic.banks();
    let mut out = Vec::new();
    for (bi, name) in names.iter().enumerate() {
        if !keep(name) {
            continue;
        }
        let x = flatten(model.banks()[bi].1);
        let g = flatten(grads[bi].1);
        let mut probe = model.clone();
        let report = check_vector(
            scope,
            name,
            &x,
            &g,
            |v| {
                unflatten(probe.banks_mut().swap_remove(bi).1, v);
                loss(&probe)
            },
            opts,
            rng,
        )?;
        out.push(report);
    }
    Ok(out)
}

fn check_tensor(
    scope: &str,
    group: &str,
    x: &Tensor3,
    analytic: &Tensor3,
    loss: &dyn Fn(&Tensor3) -> Result<f64>,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<GroupReport> {
    let (h, w, c) = (x.h(), x.w(), x.c());
    check_vector(
        scope,
        group,
        x.data(),
        analytic.data(),
        |v| loss(&Tensor3::from_vec(h, w, c, v.to_vec())?),
        opts,
        rng,
    )
}

fn weighted_sum(t: &Tensor3, w: &Tensor3) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn quadratic(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let n = 10;
    let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // A = M^T M + I
    let a: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }
        })
        .collect();
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ax = |x: &[f64], i: usize| (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>();
    let f = |x: &[f64]| Ok((0..n).map(|i| 0.5 * x[i] * ax(x, i) + b[i] * x[i]).sum());
    let g: Vec<f64> = (0..n).map(|i| ax(&x, i) + b[i]).collect();
    Ok(vec![check_vector("quadratic", "x", &x, &g, f, opts, rng)?])
}

fn svc_scope(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let cfg = ModelConfig {
        matcher: MatcherKind::Svc,
        channels: 8,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, rng)?;
    let Matcher::Svc(params) = &model.matcher else {
        unreachable!("built as svc")
    };
    let z = Tensor3::random(4, 4, 8, -1.0, 1.0, rng);
    let x = Tensor3::random(8, 8, 8, -1.0, 1.0, rng);
    let wt = Tensor3::random(5, 5, 8, -1.0, 1.0, rng);
    let (_, cache) = svc_corr_forward(&z, &x, params)?;
    let mut grads = model.zeros_like();
    let Matcher::Svc(gp) = &mut grads.matcher else {
        unreachable!("built as svc")
    };
    let (gz, gx) = svc_corr_backward(params, &cache, &wt, gp)?;
    let loss = |m: &Model| match &m.matcher {
        Matcher::Svc(p) => Ok(weighted_sum(&svc_corr(&z, &x, p)?, &wt)),
        Matcher::DwXCorr => unreachable!("built as svc"),
    };
    let mut out = check_model("svc", &model, &grads, &loss, &|n| n.starts_with("matcher."), opts, rng)?;
    out.push(check_tensor("svc", "template", &z, &gz, &|t| Ok(weighted_sum(&svc_corr(t, &x, params)?, &wt)), opts, rng)?);
    out.push(check_tensor("svc", "search", &x, &gx, &|t| Ok(weighted_sum(&svc_corr(&z, t, params)?, &wt)), opts, rng)?);
    Ok(out)
}

fn head_scope(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let model = Model::init(
        ModelConfig {
            channels: 8,
            ..ModelConfig::default()
        },
        rng,
    )?;
    let resp = Tensor3::random(9, 9, 8, -1.0, 1.0, rng);
    let labels = make_labels(&BoundingBox::new(37.0, 29.0, 18.0, 14.0), 9, 9, 8)?;
    let (lo, ls) = (1.0, 0.1);
    let (outs, cache) = head_forward_cached(&resp, &model.head)?;
    let (_, g) = base_loss_with_grad(&outs, &labels, lo, ls)?;
    let mut grads = model.zeros_like();
    let g_resp = head_backward(&model.head, &cache, &outs, &g, &mut grads.head)?;
    let loss = |m: &Model| base_loss(&head_forward(&resp, &m.head)?, &labels, lo, ls);
    let mut out = check_model("head", &model, &grads, &loss, &|n| n.starts_with("head."), opts, rng)?;
    out.push(check_tensor(
        "head",
        "response",
        &resp,
        &g_resp,
        &|t| base_loss(&head_forward(t, &model.head)?, &labels, lo, ls),
        opts,
        rng,
    )?);
    Ok(out)
}

fn arm_scope(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let n = 9;
    let li = make_labels(&BoundingBox::new(28.0, 36.0, 16.0, 16.0), n, n, 8)?.heatmap;
    let lk = make_labels(&BoundingBox::new(44.0, 30.0, 16.0, 16.0), n, n, 8)?.heatmap;
    let pi = Tensor2::random(n, n, 0.05, 0.95, rng);
    let pk = Tensor2::random(n, n, 0.05, 0.95, rng);
    let pair = ArmPair::new(pi.clone(), pk.clone(), li.clone(), lk.clone(), 3)?;
    let (p, q) = (pair.p, pair.q);
    let (_, gi, gk) = arm_loss_with_grad(&pair)?;
    let eval = |a: &Tensor2, b: &Tensor2| -> Result<f64> {
        let pr = ArmPair::with_peaks(a.clone(), b.clone(), li.clone(), lk.clone(), p, q, 3)?;
        Ok(arm_loss_with_grad(&pr)?.0)
    };
    Ok(vec![
        check_tensor("arm", "pred_i", &pi.to_tensor3(), &gi.to_tensor3(), &|t| eval(&t.to_tensor2()?, &pk), opts, rng)?,
        check_tensor("arm", "pred_k", &pk.to_tensor3(), &gk.to_tensor3(), &|t| eval(&pi, &t.to_tensor2()?), opts, rng)?,
    ])
}

fn pipeline_scope(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let mut out = Vec::new();
    for kind in [MatcherKind::Svc, MatcherKind::Dw] {
        let model = Model::init(
            ModelConfig {
                matcher: kind,
                channels: 8,
                ..ModelConfig::default()
            },
            rng,
        )?;
        let z = Tensor3::random(4, 4, 8, -1.0, 1.0, rng);
        let xi = Tensor3::random(8, 8, 8, -1.0, 1.0, rng);
        let xk = Tensor3::random(8, 8, 8, -1.0, 1.0, rng);
        let li = make_labels(&BoundingBox::new(14.0, 20.0, 16.0, 16.0), 5, 5, 8)?;
        let lk = make_labels(&BoundingBox::new(26.0, 12.0, 16.0, 16.0), 5, 5, 8)?;
        let w = LossWeights {
            off: 1.0,
            size: 0.1,
            arm: 0.5,
        };
        let (_, g) = pair_objective(&model, &z, &xi, &xk, &li, &lk, 4, None, &w)?;
        let peaks = Some(g.peaks);
        let scope = format!("pipeline-{kind}");
        let loss = |m: &Model| Ok(pair_objective(m, &z, &xi, &xk, &li, &lk, 4, peaks, &w)?.0.total);
        out.extend(check_model(&scope, &model, &g.params, &loss, &|_| true, opts, rng)?);
        out.push(check_tensor(
            &scope,
            "template",
            &z,
            &g.template,
            &|t| Ok(pair_objective(&model, t, &xi, &xk, &li, &lk, 4, peaks, &w)?.0.total),
            opts,
            rng,
        )?);
        out.push(check_tensor(
            &scope,
            "search_i",
            &xi,
            &g.search_i,
            &|t| Ok(pair_objective(&model, &z, t, &xk, &li, &lk, 4, peaks, &w)?.0.total),
            opts,
            rng,
        )?);
    }
    Ok(out)
}

fn backbone_scope(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let model = Model::init(
        ModelConfig {
            pixel_input: true,
            channels: 8,
            ..ModelConfig::default()
        },
        rng,
    )?;
    let px = FrameInput::pixels(0, Tensor3::random(16, 16, 1, 0.0, 1.0, rng));
    let (feat, cache) = extract_with_cache(&px, model.backbone.as_ref())?;
    let wt = Tensor3::random(feat.h(), feat.w(), feat.c(), -1.0, 1.0, rng);
    let mut grads = model.zeros_like();
    if let (Some(bb), Some(gb), Some(c)) = (&model.backbone, grads.backbone.as_mut(), &cache) {
        backbone_backward(bb, c, &wt, gb)?;
    }
    let loss = |m: &Model| Ok(weighted_sum(&extract_with_cache(&px, m.backbone.as_ref())?.0, &wt));
    check_model("backbone", &model, &grads, &loss, &|n| n.starts_with("backbone."), opts, rng)
}

/// Runs `scopes` and returns every group report; `passed` on each row says
/// whether it met the tolerance.
pub fn run_gradcheck(scopes: &[Scope], opts: &GradCheckOptions) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for s in scopes {
        out.extend(match s {
            Scope::Quadratic => quadratic(opts, &mut rng)?,
            Scope::Svc => svc_scope(opts, &mut rng)?,
            Scope::Head => head_scope(opts, &mut rng)?,
            Scope::Arm => arm_scope(opts, &mut rng)?,
            Scope::Pipeline => pipeline_scope(opts, &mut rng)?,
            Scope::Backbone => backbone_scope(opts, &mut rng)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let r = run_gradcheck(&[Scope::Quadratic], &GradCheckOptions::default()).unwrap();
        assert!(r[0].max_rel_err <= 1e-9, "{:?}", r);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check_vector("t", "x", &[1.0, 2.0], &[2.0, 4.1], |v| Ok(v[0] * v[0] + v[1] * v[1]), &GradCheckOptions::default(), &mut rng).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_err - 0.1 / 4.1).abs() < 1e-6);
    }

    #[test]
    fn every_scope_passes() {
        let r = run_gradcheck(&Scope::ALL, &GradCheckOptions::default()).unwrap();
        for g in &r {
            assert!(g.passed, "{g:?}");
            assert!(g.checked >= g.total.min(200));
        }
    }
}
