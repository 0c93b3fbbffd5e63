//! Unlearning objectives and the selected-expert unlearning loop.

mod losses;
mod run;

use serde::{Deserialize, Serialize};

use crate::analytics::Strategy;
use crate::error::{Error, Result};

pub use losses::{
    anchor_loss, anchor_term, control_vector, loss_ga, loss_gdiff, loss_npo, loss_rmu, npo_term,
    reference_logprobs, rmu_terms, sequence_logprobs, LossBundle,
};
pub use run::{
    select_plan, seuf_step, unlearn_run, EvalPoint, MetricRow, StepContext, UnlearnOutcome, METRICS_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ga,
    Gdiff,
    Npo,
    Rmu,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Ga, Algorithm::Gdiff, Algorithm::Npo, Algorithm::Rmu];

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Ga => "GA",
            Algorithm::Gdiff => "GDiff",
            Algorithm::Npo => "NPO",
            Algorithm::Rmu => "RMU",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ga" => Ok(Algorithm::Ga),
            "gdiff" => Ok(Algorithm::Gdiff),
            "npo" => Ok(Algorithm::Npo),
            "rmu" => Ok(Algorithm::Rmu),
            other => Err(Error::config(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Ga => "ga",
            Algorithm::Gdiff => "gdiff",
            Algorithm::Npo => "npo",
            Algorithm::Rmu => "rmu",
        })
    }
}

/// How target experts are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Affinity,
    Random,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affinity" => Ok(Selection::Affinity),
            "random" => Ok(Selection::Random),
            other => Err(Error::config(format!("unknown selection `{other}`"))),
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selection::Affinity => "affinity",
            Selection::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub algorithm: Algorithm,
    pub seuf: bool,
    /// Number of target experts.
    pub m: usize,
    pub strategy: Strategy,
    pub selection: Selection,
    /// Retain weight. `None` picks the algorithm's own default.
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub rmu_c: f64,
    pub rmu_retain_weight: f64,
    pub rmu_layer: usize,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub calibration_tokens: usize,
    pub eval_interval: u64,
    /// Size of the per-layer expert sets compared by the overlap ratio.
    pub overlap_top: usize,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ga,
            seuf: true,
            m: 1,
            strategy: Strategy::SameLayer,
            selection: Selection::Affinity,
            lambda: None,
            alpha: 1.0,
            beta: 0.001,
            rmu_c: 20.0,
            rmu_retain_weight: 100.0,
            rmu_layer: 1,
            lr: 1e-2,
            steps: 200,
            batch_size: 32,
            seed: 0,
            calibration_tokens: 2000,
            eval_interval: 1,
            overlap_top: 6,
        }
    }
}

impl UnlearnConfig {
    /// GA and NPO carry no retain term by default; GDiff weighs it 1 and RMU
    /// uses its own retain weight.
    pub fn effective_lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.algorithm {
            Algorithm::Ga | Algorithm::Npo => 0.0,
            Algorithm::Gdiff => 1.0,
            Algorithm::Rmu => self.rmu_retain_weight,
        })
    }

    /// The anchor term only exists under selected-expert unlearning.
    pub fn effective_alpha(&self) -> f64 {
        if self.seuf {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be finite and non-negative, got {v}")))
            }
        };
        finite_nonneg("alpha", self.alpha)?;
        finite_nonneg("lambda", self.effective_lambda())?;
        finite_nonneg("rmu_c", self.rmu_c)?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.m == 0 {
            return Err(Error::config("m must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.overlap_top == 0 {
            return Err(Error::config("batch_size, eval_interval and overlap_top must be positive"));
        }
        Ok(())
    }
}
