//! Command-line surface and the layered run configuration.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use stmatch::model::{MatcherKind, ModelConfig, Precision};
use stmatch::sim::{AblationProtocol, ScenarioFamily};
use stmatch::tracker::{RefreshPolicy, TrackConfig};
use stmatch::training::gradcheck::{GradCheckOptions, Scope};
use stmatch::training::TrainConfig;

use crate::Failure;

#[derive(Debug, Parser)]
#[command(name = "stmatch", version, about = "Siamese tracker with spatio-temporal matching: synthetic data, training, tracking and evaluation.")]
#[command(after_help = "Environment:\n  STM_THREADS  worker threads for `eval` and `ablate` (other subcommands run on one thread)")]
pub struct Cli {
    /// JSON run config layered over the defaults; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a directory of seeded synthetic sequences.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Track one sequence and write per-frame boxes.
    Track(TrackArgs),
    /// Benchmark a model over a dataset or a seeded scenario set.
    Eval(EvalArgs),
    /// Finite-difference gradient checks; exits with 2 if any group fails.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the matcher x temporal-module grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Base seed; sequence i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sequences.
    #[arg(long)]
    pub count: Option<usize>,
    /// Frames per sequence.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Emit single-channel pixel frames instead of feature maps.
    #[arg(long)]
    pub pixel: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Parameter directory to write.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// SGD steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seeds both parameter init and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the temporal alignment loss.
    #[arg(long)]
    pub lambda_arm: Option<f64>,
    /// Correlation: dw or svc.
    #[arg(long)]
    pub matcher: Option<MatcherKind>,
    /// Triplets per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Loss-curve CSV; defaults to <out>/loss.csv.
    #[arg(long, value_name = "FILE")]
    pub loss_csv: Option<PathBuf>,
}

/// Tracker settings shared by `track`, `eval` and `ablate`.
#[derive(Debug, Args)]
pub struct TrackFlags {
    /// Candidates scored per frame by the temporal module.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the Hann window in [0, 1].
    #[arg(long)]
    pub window_influence: Option<f64>,
    /// Scale/aspect change penalty coefficient.
    #[arg(long)]
    pub penalty_k: Option<f64>,
    /// When the temporal memory is rewritten: literal or always.
    #[arg(long)]
    pub refresh: Option<RefreshPolicy>,
    /// Arithmetic of the correlation kernel: double or single.
    #[arg(long)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PrecisionArg {
    Double,
    Single,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Double => Precision::Double,
            PrecisionArg::Single => Precision::Single,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Sequence descriptor JSON.
    #[arg(long, value_name = "FILE")]
    pub seq: Option<PathBuf>,
    /// Parameter directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub params: Option<PathBuf>,
    /// boxes.csv to write.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Disable temporal candidate selection.
    #[arg(long)]
    pub no_arm: bool,
    #[command(flatten)]
    pub track: TrackFlags,
    /// Write raw and final heatmaps (PGM) and head outputs (ST1) per frame.
    #[arg(long, value_name = "DIR")]
    pub dump_heatmaps: Option<PathBuf>,
    /// Per-frame candidate scores CSV.
    #[arg(long, value_name = "FILE")]
    pub candidates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory; without it, scenarios are sampled from the family.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub params: Option<PathBuf>,
    /// Metrics CSV to write.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Per-frame records CSV.
    #[arg(long, value_name = "FILE")]
    pub frames_csv: Option<PathBuf>,
    /// Sampled scenarios when no dataset is given.
    #[arg(long)]
    pub scenarios: Option<usize>,
    /// First sampled scenario seed.
    #[arg(long)]
    pub seed_offset: Option<u64>,
    #[arg(long)]
    pub no_arm: bool,
    #[command(flatten)]
    pub track: TrackFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or a comma list of quadratic, svc, head, arm, pipeline, backbone.
    #[arg(long)]
    pub scope: Option<String>,
    /// Central-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Largest accepted relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Coordinates drawn from each larger group.
    #[arg(long)]
    pub max_coords: Option<usize>,
    /// Seed for coordinate sampling and the random fixtures.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-group report CSV.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Grid such as `dw,svc x arm,noarm`.
    #[arg(long)]
    pub cells: Option<String>,
    /// Summary CSV, one row per cell.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Sign-test CSV; defaults to <out> with a .comparisons.csv extension.
    #[arg(long, value_name = "FILE")]
    pub comparisons: Option<PathBuf>,
    /// Directory for per-cell metrics CSVs.
    #[arg(long, value_name = "DIR")]
    pub metrics_dir: Option<PathBuf>,
    /// Directory to save the trained models in.
    #[arg(long, value_name = "DIR")]
    pub save_models: Option<PathBuf>,
    #[arg(long)]
    pub scenarios: Option<usize>,
    #[arg(long)]
    pub seed_offset: Option<u64>,
    #[arg(long)]
    pub train_sequences: Option<usize>,
    /// Training steps per model.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training seed of every model.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Temporal loss weight of the models used by ARM cells.
    #[arg(long)]
    pub lambda_arm: Option<f64>,
    #[command(flatten)]
    pub track: TrackFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub seed: u64,
    pub count: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection { seed: 0, count: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub scenarios: usize,
    pub seed_offset: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            scenarios: 200,
            seed_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub cells: String,
    pub protocol: AblationProtocol,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            cells: "dw,svc x arm,noarm".into(),
            protocol: AblationProtocol::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub scopes: Vec<Scope>,
    pub options: GradCheckOptions,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            scopes: Scope::ALL.to_vec(),
            options: GradCheckOptions::default(),
        }
    }
}

/// Input and output locations; which ones matter depends on the subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub seq: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub frames_csv: Option<PathBuf>,
    pub dump_heatmaps: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub comparisons: Option<PathBuf>,
    pub metrics_dir: Option<PathBuf>,
    pub save_models: Option<PathBuf>,
}

/// Everything a run depends on, as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenSection,
    pub family: ScenarioFamily,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub track: TrackConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub gradcheck: GradcheckSection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(anyhow::anyhow!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(anyhow::anyhow!("invalid config {}: {e}", path.display())))
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

impl TrackFlags {
    fn apply(&self, t: &mut TrackConfig) {
        set(&mut t.k, self.k);
        set(&mut t.window_influence, self.window_influence);
        set(&mut t.penalty_k, self.penalty_k);
        set(&mut t.refresh, self.refresh);
        set(&mut t.precision, self.precision.map(Precision::from));
    }
}

impl GenArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        set(&mut c.gen.seed, self.seed);
        set(&mut c.gen.count, self.count);
        set(&mut c.family.frames, self.frames);
        if self.pixel {
            c.family.pixel_mode = true;
        }
        set_path(&mut c.paths.out, &self.out);
    }
}

impl TrainArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        set(&mut c.train.steps, self.steps);
        set(&mut c.train.seed, self.seed);
        set(&mut c.train.lambda_arm, self.lambda_arm);
        set(&mut c.train.batch, self.batch);
        set(&mut c.model.matcher, self.matcher);
        set_path(&mut c.paths.data, &self.data);
        set_path(&mut c.paths.out, &self.out);
        set_path(&mut c.paths.loss_csv, &self.loss_csv);
    }
}

impl TrackArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        if self.no_arm {
            c.track.arm = false;
        }
        self.track.apply(&mut c.track);
        set_path(&mut c.paths.seq, &self.seq);
        set_path(&mut c.paths.params, &self.params);
        set_path(&mut c.paths.out, &self.out);
        set_path(&mut c.paths.dump_heatmaps, &self.dump_heatmaps);
        set_path(&mut c.paths.candidates, &self.candidates);
    }
}

impl EvalArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        if self.no_arm {
            c.track.arm = false;
        }
        self.track.apply(&mut c.track);
        set(&mut c.eval.scenarios, self.scenarios);
        set(&mut c.eval.seed_offset, self.seed_offset);
        set_path(&mut c.paths.data, &self.data);
        set_path(&mut c.paths.params, &self.params);
        set_path(&mut c.paths.out, &self.out);
        set_path(&mut c.paths.frames_csv, &self.frames_csv);
    }
}

impl GradcheckArgs {
    pub fn apply(&self, c: &mut RunConfig) -> Result<(), Failure> {
        if let Some(s) = &self.scope {
            c.gradcheck.scopes = parse_scopes(s)?;
        }
        let o = &mut c.gradcheck.options;
        set(&mut o.step, self.step);
        set(&mut o.tolerance, self.tolerance);
        set(&mut o.max_coords, self.max_coords);
        set(&mut o.seed, self.seed);
        set_path(&mut c.paths.out, &self.out);
        Ok(())
    }
}

impl AblateArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        self.track.apply(&mut c.track);
        if let Some(cells) = &self.cells {
            c.ablate.cells.clone_from(cells);
        }
        let p = &mut c.ablate.protocol;
        set(&mut p.scenarios, self.scenarios);
        set(&mut p.seed_offset, self.seed_offset);
        set(&mut p.train_sequences, self.train_sequences);
        set(&mut p.lambda_arm, self.lambda_arm);
        set(&mut c.train.steps, self.steps);
        set(&mut c.train.seed, self.seed);
        set_path(&mut c.paths.out, &self.out);
        set_path(&mut c.paths.comparisons, &self.comparisons);
        set_path(&mut c.paths.metrics_dir, &self.metrics_dir);
        set_path(&mut c.paths.save_models, &self.save_models);
    }
}

pub fn parse_scopes(s: &str) -> Result<Vec<Scope>, Failure> {
    if s.trim() == "all" {
        return Ok(Scope::ALL.to_vec());
    }
    s.split(',')
        .map(|t| t.trim().parse::<Scope>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips() {
        let c = RunConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"track": {"k": 5}, "model": {"matcher": "dw"}}"#).unwrap();
        assert_eq!(c.track.k, 5);
        assert_eq!(c.track.window_influence, TrackConfig::default().window_influence);
        assert_eq!(c.model.matcher, MatcherKind::Dw);
        assert_eq!(c.model.channels, ModelConfig::default().channels);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trak": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"track": {"kk": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"ablate": {"protocol": {"lambda": 1}}}"#).is_err());
    }

    #[test]
    fn scope_lists() {
        assert_eq!(parse_scopes("all").ok().unwrap().len(), Scope::ALL.len());
        assert_eq!(parse_scopes("svc, head").ok().unwrap(), [Scope::Svc, Scope::Head]);
        assert!(parse_scopes("svc,nope").is_err());
    }
}
