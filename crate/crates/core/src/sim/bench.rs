//! Benchmark harness: model-driven tracking over seeded scenario sets,
//! per-scenario and per-frame CSV reports, the ablation grid and a paired
//! sign test on failure counts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::features::FrameInput;
use crate::head::BoundingBox;
use crate::model::{MatcherKind, Model};
use crate::tracker::{init, step, TrackConfig, TrackerState};

use super::metrics::{evaluate, FrameStatus, Metrics, SequenceTracker};
use super::scenario::{gen_sequence, ScenarioFamily, SyntheticSequence};

/// Adapts the online tracker to the evaluation protocol.
pub struct ModelTracker<'a> {
    pub model: &'a Model,
    pub cfg: TrackConfig,
    state: Option<TrackerState>,
}

impl<'a> ModelTracker<'a> {
    pub fn new(model: &'a Model, cfg: TrackConfig) -> Self {
        ModelTracker { model, cfg, state: None }
    }
}

impl SequenceTracker for ModelTracker<'_> {
    fn start(&mut self, frame: &FrameInput, b: &BoundingBox) -> Result<()> {
        self.state = Some(init(frame, b, self.model, &self.cfg)?);
        Ok(())
    }

    fn advance(&mut self, frame: &FrameInput) -> Result<(BoundingBox, usize)> {
        let state = self.state.as_ref().ok_or_else(|| Error::invalid("track", "tracker stepped before init"))?;
        let (out, next) = step(state, frame, self.model, &self.cfg)?;
        self.state = Some(next);
        Ok((out.bbox, out.k_hat))
    }
}

pub fn evaluate_model(model: &Model, cfg: &TrackConfig, seq: &SyntheticSequence) -> Result<Metrics> {
    evaluate(&mut ModelTracker::new(model, *cfg), seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenarios: Vec<Metrics>,
}

impl BenchmarkReport {
    pub fn total_failures(&self) -> usize {
        self.scenarios.iter().map(|m| m.failures).sum()
    }

    pub fn mean_iou(&self) -> f64 {
        mean(self.scenarios.iter().map(|m| m.mean_iou))
    }

    pub fn mean_center_err(&self) -> f64 {
        mean(self.scenarios.iter().map(|m| m.mean_center_err))
    }

    pub fn failures(&self) -> Vec<usize> {
        self.scenarios.iter().map(|m| m.failures).collect()
    }

    /// `scenario,frames,mean_iou,mean_center_err,failures`, one row per scenario.
    pub fn write_metrics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scenario", "frames", "mean_iou", "mean_center_err", "failures"])?;
        for m in &self.scenarios {
            w.write_record([
                m.scenario.to_string(),
                m.frames.to_string(),
                format!("{:.6}", m.mean_iou),
                format!("{:.6}", m.mean_center_err),
                m.failures.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `scenario,frame,status,iou,center_err,k_hat`.
    pub fn write_frames_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scenario", "frame", "status", "iou", "center_err", "k_hat"])?;
        for m in &self.scenarios {
            for r in &m.records {
                let status = match r.status {
                    FrameStatus::Init => "init",
                    FrameStatus::Tracked => "tracked",
                    FrameStatus::Skipped => "skipped",
                };
                w.write_record([
                    m.scenario.to_string(),
                    r.frame.to_string(),
                    status.to_string(),
                    format!("{:.6}", r.iou),
                    format!("{:.6}", r.center_err),
                    r.k_hat.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates every seed of `family` in parallel on the current rayon pool;
/// results are kept in seed order.
pub fn run_benchmark(model: &Model, cfg: &TrackConfig, family: &ScenarioFamily, seeds: &[u64]) -> Result<BenchmarkReport> {
    let scenarios = seeds
        .par_iter()
        .map(|&s| evaluate_model(model, cfg, &gen_sequence(&family.sample(s))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport { scenarios })
}

pub fn run_benchmark_on(model: &Model, cfg: &TrackConfig, seqs: &[SyntheticSequence]) -> Result<BenchmarkReport> {
    let scenarios = seqs
        .par_iter()
        .map(|s| evaluate_model(model, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport { scenarios })
}

/// One-sided paired sign test that `better` has fewer failures than `worse`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Scenarios where `better` failed less.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(better: &[usize], worse: &[usize]) -> Result<SignTest> {
    if better.len() != worse.len() {
        return Err(Error::invalid("sign_test", "paired samples differ in length"));
    }
    let wins = better.iter().zip(worse).filter(|(a, b)| a < b).count();
    let losses = better.iter().zip(worse).filter(|(a, b)| a > b).count();
    let ties = better.len() - wins - losses;
    let n = (wins + losses) as u64;
    let p_value = if n == 0 || wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).map_err(|e| Error::invalid("sign_test", e.to_string()))?;
        // P(X >= wins)
        bin.sf(wins as u64 - 1)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub matcher: MatcherKind,
    pub arm: bool,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{}{}", self.matcher, if self.arm { "+arm" } else { "" })
    }

    /// Parses a grid such as `dw,svc x arm,noarm` into its cells, matcher-major.
    pub fn parse_grid(spec: &str) -> Result<Vec<AblationCell>> {
        let bad = || Error::invalid("cells", format!("expected `<matchers> x <arm|noarm,...>`, got `{spec}`"));
        let (m, a) = spec.split_once(" x ").or_else(|| spec.split_once('x')).ok_or_else(bad)?;
        let list = |s: &str| s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect::<Vec<_>>();
        let matchers = list(m).iter().map(|t| t.parse::<MatcherKind>()).collect::<Result<Vec<_>>>()?;
        let arms = list(a)
            .iter()
            .map(|t| match t.as_str() {
                "arm" => Ok(true),
                "noarm" => Ok(false),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>>>()?;
        if matchers.is_empty() || arms.is_empty() {
            return Err(bad());
        }
        let mut cells = Vec::new();
        for &matcher in &matchers {
            for &arm in &arms {
                let c = AblationCell { matcher, arm };
                if !cells.contains(&c) {
                    cells.push(c);
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub report: BenchmarkReport,
}

/// `cell,matcher,arm,scenarios,total_failures,mean_iou,mean_center_err`.
pub fn write_summary_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "matcher", "arm", "scenarios", "total_failures", "mean_iou", "mean_center_err"])?;
    for r in rows {
        w.write_record([
            r.cell.label(),
            r.cell.matcher.to_string(),
            r.cell.arm.to_string(),
            r.report.scenarios.len().to_string(),
            r.report.total_failures().to_string(),
            format!("{:.6}", r.report.mean_iou()),
            format!("{:.6}", r.report.mean_center_err()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Evaluates each cell with its own model; `cell.arm` switches candidate
/// selection on top of `cfg`.
pub fn run_ablation(
    models: &[(AblationCell, &Model)],
    cfg: &TrackConfig,
    family: &ScenarioFamily,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &(cell, model) in models {
        if model.config.matcher != cell.matcher {
            return Err(Error::invalid(
                "ablation",
                format!("model for `{}` was built as `{}`", cell.label(), model.config.matcher),
            ));
        }
        let c = TrackConfig { arm: cell.arm, ..*cfg };
        rows.push(AblationRow {
            cell,
            report: run_benchmark(model, &c, family, seeds)?,
        });
    }
    Ok(rows)
}

/// Sign test of `better` against `worse` as a named comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: String,
    pub worse: String,
    pub better_failures: usize,
    pub worse_failures: usize,
    pub test: SignTest,
}

/// The directional claims that apply to the cells present in `rows`: ARM
/// beats no ARM for each matcher, and SVC beats DW without ARM.
pub fn ablation_comparisons(rows: &[AblationRow]) -> Result<Vec<Comparison>> {
    let find = |matcher, arm| rows.iter().find(|r| r.cell == AblationCell { matcher, arm });
    let pairs = [
        ((MatcherKind::Svc, true), (MatcherKind::Svc, false)),
        ((MatcherKind::Svc, false), (MatcherKind::Dw, false)),
        ((MatcherKind::Dw, true), (MatcherKind::Dw, false)),
    ];
    let mut out = Vec::new();
    for (b, w) in pairs {
        if let (Some(b), Some(w)) = (find(b.0, b.1), find(w.0, w.1)) {
            out.push(Comparison {
                better: b.cell.label(),
                worse: w.cell.label(),
                better_failures: b.report.total_failures(),
                worse_failures: w.report.total_failures(),
                test: sign_test(&b.report.failures(), &w.report.failures())?,
            });
        }
    }
    Ok(out)
}

/// `better,worse,better_failures,worse_failures,wins,losses,ties,p_value`.
pub fn write_comparisons_csv(rows: &[Comparison], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["better", "worse", "better_failures", "worse_failures", "wins", "losses", "ties", "p_value"])?;
    for c in rows {
        w.write_record([
            c.better.clone(),
            c.worse.clone(),
            c.better_failures.to_string(),
            c.worse_failures.to_string(),
            c.test.wins.to_string(),
            c.test.losses.to_string(),
            c.test.ties.to_string(),
            format!("{:.6e}", c.test.p_value),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
