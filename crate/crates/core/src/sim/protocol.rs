//! End-to-end ablation: train one model per cell on a seeded training set,
//! then evaluate every cell on the same benchmark seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MatcherKind, Model, ModelConfig};
use crate::tracker::TrackConfig;
use crate::training::{init_model, train, TrainConfig};

use super::bench::{run_ablation, AblationCell, AblationRow};
use super::scenario::{gen_sequence, ScenarioFamily};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationProtocol {
    /// Training sequences, drawn from the family at `train_seed_offset..`.
    pub train_sequences: usize,
    pub train_seed_offset: u64,
    /// Temporal loss weight for the models of ARM cells; cells without ARM
    /// train their model with the temporal term off.
    pub lambda_arm: f64,
    /// Benchmark scenarios, seeds `seed_offset..seed_offset + scenarios`.
    pub scenarios: usize,
    pub seed_offset: u64,
}

impl Default for AblationProtocol {
    fn default() -> Self {
        AblationProtocol {
            train_sequences: 64,
            train_seed_offset: 1_000_000,
            lambda_arm: 0.5,
            scenarios: 200,
            seed_offset: 0,
        }
    }
}

impl AblationProtocol {
    pub fn seeds(&self) -> Vec<u64> {
        (self.seed_offset..self.seed_offset + self.scenarios as u64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_sequences == 0 || self.scenarios == 0 {
            return Err(Error::invalid("ablation", "training and benchmark sets must be non-empty"));
        }
        let train = self.train_seed_offset..self.train_seed_offset + self.train_sequences as u64;
        let bench = self.seed_offset..self.seed_offset + self.scenarios as u64;
        if train.start < bench.end && bench.start < train.end {
            return Err(Error::invalid("ablation", "training seeds overlap benchmark seeds"));
        }
        if !(self.lambda_arm >= 0.0) {
            return Err(Error::invalid("ablation", "lambda_arm must be non-negative"));
        }
        Ok(())
    }

    pub fn lambda_for(&self, cell: &AblationCell) -> f64 {
        if cell.arm {
            self.lambda_arm
        } else {
            0.0
        }
    }
}

/// Trains the distinct `(matcher, lambda_arm)` models the cells need, in cell
/// order. `on_model` hears about each finished model.
pub fn train_cell_models(
    cells: &[AblationCell],
    protocol: &AblationProtocol,
    family: &ScenarioFamily,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_model: impl FnMut(MatcherKind, f64, &Model),
) -> Result<Vec<(AblationCell, Model)>> {
    protocol.validate()?;
    let data = (0..protocol.train_sequences as u64)
        .map(|i| gen_sequence(&family.sample(protocol.train_seed_offset + i)))
        .collect::<Result<Vec<_>>>()?;
    // keyed by the bit pattern so equal weights share a model
    let mut trained: BTreeMap<(bool, u64), Model> = BTreeMap::new();
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let lambda = protocol.lambda_for(cell);
        let key = (cell.matcher == MatcherKind::Svc, lambda.to_bits());
        if !trained.contains_key(&key) {
            let cfg = TrainConfig { lambda_arm: lambda, ..*train_cfg };
            let mut m = init_model(ModelConfig { matcher: cell.matcher, ..*model }, cfg.seed)?;
            train(&mut m, &data, &cfg, |_| {})?;
            on_model(cell.matcher, lambda, &m);
            trained.insert(key, m);
        }
        out.push((*cell, trained[&key].clone()));
    }
    Ok(out)
}

/// Trains and evaluates the grid.
pub fn run_protocol(
    cells: &[AblationCell],
    protocol: &AblationProtocol,
    family: &ScenarioFamily,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    track: &TrackConfig,
    on_model: impl FnMut(MatcherKind, f64, &Model),
) -> Result<Vec<AblationRow>> {
    let models = train_cell_models(cells, protocol, family, model, train_cfg, on_model)?;
    let refs: Vec<(AblationCell, &Model)> = models.iter().map(|(c, m)| (*c, m)).collect();
    run_ablation(&refs, track, family, &protocol.seeds())
}
