//! Experiment configuration: one JSON document with a section per subsystem.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clustering::KMeansConfig;
use crate::error::{Error, Result};
use crate::population::PopulationConfig;
use crate::predictor::ForestConfig;
use crate::resources::ResourcesConfig;
use crate::selector::{GaConfig, ObjectiveWeights};
use crate::splitnn::{LocalTraining, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Cen,
    Sl,
    Csfl,
    Crsfl,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Cen, Arm::Sl, Arm::Csfl, Arm::Crsfl];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Cen => "cen",
            Arm::Sl => "sl",
            Arm::Csfl => "csfl",
            Arm::Crsfl => "crsfl",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?} (expected cen, sl, csfl or crsfl)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub ga: GaConfig,
    pub weights: ObjectiveWeights,
    /// Fraction of each cluster drawn at random by the CSFL baseline.
    pub random_fraction: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { ga: GaConfig::default(), weights: ObjectiveWeights::equal(), random_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Layers kept on the client.
    pub cut: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 128, 128], cut: 2, lr: 0.01, momentum: 0.9, batch_size: 32, local_epochs: 1 }
    }
}

impl ModelConfig {
    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    pub fn training(&self) -> LocalTraining {
        LocalTraining {
            batch_size: self.batch_size,
            epochs: self.local_epochs,
            opt: Sgd { lr: self.lr, momentum: self.momentum },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub bytes_per_real: f64,
    /// Milliseconds per (sample x client parameter) on one processing unit.
    pub compute_ms: f64,
    pub message_overhead_bytes: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { bytes_per_real: 8.0, compute_ms: 2e-7, message_overhead_bytes: 64.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arm: Arm,
    pub rounds: usize,
    pub seed: u64,
    /// Fixed per-round latency budget for SL. When absent, SL takes its
    /// budgets from a CRSFL run on the same population.
    pub sl_budget_ms: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { arm: Arm::Crsfl, rounds: 50, seed: 7, sl_budget_ms: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub population: PopulationConfig,
    pub resources: ResourcesConfig,
    pub clustering: KMeansConfig,
    pub predictor: ForestConfig,
    pub selector: SelectorConfig,
    pub model: ModelConfig,
    pub costs: CostModel,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.resources.validate()?;
        self.predictor.validate()?;
        self.selector.ga.validate()?;
        if self.run.rounds == 0 {
            return Err(Error::Config("run.rounds must be >= 1".into()));
        }
        if self.clustering.k == 0 || self.clustering.max_iter == 0 {
            return Err(Error::Config("clustering.k and clustering.max_iter must be >= 1".into()));
        }
        if !(self.selector.random_fraction > 0.0 && self.selector.random_fraction <= 1.0) {
            return Err(Error::Config("selector.random_fraction must be in (0, 1]".into()));
        }
        let m = &self.model;
        if m.hidden.is_empty() || m.hidden.contains(&0) {
            return Err(Error::Config("model.hidden must list positive widths".into()));
        }
        if m.cut == 0 || m.cut > m.hidden.len() {
            return Err(Error::Config(format!("model.cut must be in 1..={}", m.hidden.len())));
        }
        if m.batch_size == 0 || m.local_epochs == 0 || !(m.lr > 0.0) || !(0.0..1.0).contains(&m.momentum) {
            return Err(Error::Config("model: batch_size, local_epochs and lr must be positive, momentum in [0, 1)".into()));
        }
        let c = &self.costs;
        if !(c.bytes_per_real > 0.0 && c.compute_ms > 0.0 && c.message_overhead_bytes >= 0.0) {
            return Err(Error::Config("costs: constants must be positive".into()));
        }
        if self.run.sl_budget_ms.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::Config("run.sl_budget_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides. Values parse as JSON when they
    /// can and are taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for raw in overrides {
            let raw = raw.as_ref().trim_start_matches("--");
            let (path, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not of the form section.key=value")))?;
            let value: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            let mut slot = &mut doc;
            for part in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("override: unknown field {path:?}")))?;
            }
            *slot = value;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
