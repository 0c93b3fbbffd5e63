//! Experiment configuration and the per-run report row.

use std::path::{Path, PathBuf};

use moeulab::analytics::Strategy;
use moeulab::bench::BenchParams;
use moeulab::pretrain::PretrainConfig;
use moeulab::unlearn::{Algorithm, Selection, UnlearnConfig};
use moeulab::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, HarnessResult};

/// How the base model is initialised before pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub seed: u64,
    /// Scale of the shared per-topic offset added to topic-band embeddings.
    pub topic_prior: f64,
    pub topic_seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            topic_prior: 2.0,
            topic_seed: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub bench: BenchParams,
    pub init: InitConfig,
    pub pretrain: PretrainConfig,
    pub unlearn: UnlearnConfig,
    /// Steps between held-out evaluations during unlearning.
    pub eval_interval: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let unlearn = UnlearnConfig::default();
        Self {
            model: ModelConfig::default(),
            bench: BenchParams::default(),
            init: InitConfig::default(),
            pretrain: PretrainConfig::default(),
            eval_interval: unlearn.eval_interval,
            unlearn,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config, filling omitted fields with defaults. The top-level
    /// `eval_interval` governs unlearning; giving a different value inside
    /// `unlearn` is rejected.
    pub fn from_json(text: &str) -> HarnessResult<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(HarnessError::usage)?;
        Self::from_value(raw)
    }

    pub fn from_value(raw: serde_json::Value) -> HarnessResult<Self> {
        let top = raw.get("eval_interval").cloned();
        let inner = raw.get("unlearn").and_then(|u| u.get("eval_interval")).cloned();
        let mut cfg: Self = serde_json::from_value(raw).map_err(HarnessError::usage)?;
        match (top, inner) {
            (Some(a), Some(b)) if a != b => {
                return Err(HarnessError::Usage(format!(
                    "eval_interval {a} conflicts with unlearn.eval_interval {b}"
                )))
            }
            (None, Some(_)) => cfg.eval_interval = cfg.unlearn.eval_interval,
            _ => {}
        }
        cfg.unlearn.eval_interval = cfg.eval_interval;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// A config file may hold one config or a list of them (a sweep).
    pub fn load_many(path: &Path) -> HarnessResult<Vec<Self>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(HarnessError::usage)?;
        match raw {
            serde_json::Value::Array(items) if items.is_empty() => Err(HarnessError::Usage("empty sweep".into())),
            serde_json::Value::Array(items) => items.into_iter().map(Self::from_value).collect(),
            other => Ok(vec![Self::from_value(other)?]),
        }
    }

    pub fn validate(&self) -> HarnessResult<()> {
        self.model.validate().map_err(HarnessError::usage)?;
        self.bench.validate().map_err(HarnessError::usage)?;
        self.pretrain.validate().map_err(HarnessError::usage)?;
        self.unlearn.validate().map_err(HarnessError::usage)?;
        if self.eval_interval == 0 {
            return Err(HarnessError::Usage("eval_interval must be positive".into()));
        }
        if self.unlearn.eval_interval != self.eval_interval {
            return Err(HarnessError::Usage("unlearn.eval_interval differs from eval_interval".into()));
        }
        if self.model.vocab_size != self.bench.vocab_size {
            return Err(HarnessError::Usage(format!(
                "model vocabulary {} differs from benchmark vocabulary {}",
                self.model.vocab_size, self.bench.vocab_size
            )));
        }
        if self.unlearn.rmu_layer >= self.model.num_layers {
            return Err(HarnessError::Usage(format!(
                "rmu_layer {} out of range for {} layers",
                self.unlearn.rmu_layer, self.model.num_layers
            )));
        }
        let slots = match self.unlearn.strategy {
            Strategy::SameLayer => self.model.experts_per_layer,
            Strategy::CrossLayer => self.model.experts_per_layer * self.model.num_layers,
        };
        if self.unlearn.m > slots {
            return Err(HarnessError::Usage(format!("M = {} exceeds the {slots} candidate experts", self.unlearn.m)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// One row of a results table: a finished unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub algorithm: Algorithm,
    pub seuf: bool,
    pub m: usize,
    pub strategy: Strategy,
    pub selection: Selection,
    pub alpha: f64,
    pub seed: u64,
    /// Forget efficacy and utility of the chosen checkpoint.
    pub fe: f64,
    pub ut: f64,
    pub base_fe: f64,
    pub base_ut: f64,
    pub chance: f64,
    pub threshold: f64,
    pub matched: bool,
    pub step: u64,
    pub first_match_step: Option<u64>,
    /// Overlap at the chosen checkpoint and at the first matched one.
    pub overlap: f64,
    pub first_match_overlap: Option<f64>,
    pub target_retention: f64,
    pub param_fraction: f64,
    pub diverged_at: Option<u64>,
    pub wall_seconds: f64,
}

impl ReportRow {
    pub fn method_label(algorithm: Algorithm, seuf: bool, selection: Selection) -> String {
        match (seuf, selection) {
            (false, _) => algorithm.label().to_string(),
            (true, Selection::Affinity) => format!("{}+SEUF", algorithm.label()),
            (true, Selection::Random) => format!("{}+Random", algorithm.label()),
        }
    }

    pub fn validate(&self) -> HarnessResult<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.fe) || !unit(self.ut) {
            return Err(HarnessError::Run(format!("FE {} / UT {} outside [0, 1]", self.fe, self.ut)));
        }
        if !(self.param_fraction > 0.0 && self.param_fraction <= 1.0) {
            return Err(HarnessError::Run(format!("parameter fraction {} outside (0, 1]", self.param_fraction)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_conflicting_fields() {
        assert!(ExperimentConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"eval_interval": 2, "unlearn": {"eval_interval": 3}}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"unlearn": {"eval_interval": 3}}"#).unwrap();
        assert_eq!(c.eval_interval, 3);
        assert!(ExperimentConfig::from_json(r#"{"model": {"vocab_size": 100}}"#).is_err());
    }
}
