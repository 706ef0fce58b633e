//! Scenario configuration: a strict JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::BaselineRemainder;
use crate::estimators::StratifierKind;
use crate::model::{
    DesignError, EstimatorKind, EstimatorSpec, FutilityKind, FutilityRuleSpec, ShiftSpec,
    TrialDesign, ValidatedDesign,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Directory for result files; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub dir: Option<String>,
    /// Write one row per replicate in addition to the aggregates.
    #[serde(default = "yes")]
    pub per_replicate_rows: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: None,
            per_replicate_rows: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub design: TrialDesign,
    pub shift_grid: Vec<ShiftSpec>,
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub rules: Vec<FutilityRuleSpec>,
    /// Baseline availability fractions. Empty means complete baseline data.
    #[serde(default)]
    pub baseline_fraction_grid: Vec<f64>,
    pub replicates: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub stratifier: StratifierKind,
    #[serde(default)]
    pub baseline_remainder: BaselineRemainder,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<ValidatedDesign, ConfigError> {
        let design = self.design.validate()?;
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.replicates == 0 {
            return invalid("replicates must be at least 1".into());
        }
        if self.shift_grid.is_empty() {
            return invalid("shift_grid is empty".into());
        }
        if self.estimators.is_empty() {
            return invalid("estimators is empty".into());
        }
        for s in &self.shift_grid {
            s.validate_for(&self.design)?;
        }
        for r in &self.rules {
            r.validate()?;
        }
        if !self.rules.is_empty() && !self.design.endpoint.is_binary() {
            return invalid("futility rules require a binary endpoint".into());
        }
        for f in &self.baseline_fraction_grid {
            if !(*f > 0.0 && *f <= 1.0) {
                return invalid(format!("baseline fraction {f} outside (0, 1]"));
            }
            let target = (f * design.total_n() as f64).round() as usize;
            if target < design.ia_size() {
                return invalid(format!(
                    "baseline fraction {f} cannot contain the {} interim patients",
                    design.ia_size()
                ));
            }
        }
        for e in &self.estimators {
            let uses_pp = self.rules.iter().any(|r| r.kind == FutilityKind::PredictiveProb);
            let pp_ok = matches!(e.kind, EstimatorKind::Unadjusted | EstimatorKind::NaivePostStrat);
            if uses_pp && !pp_ok {
                return invalid(format!(
                    "predictive rules support unadjusted and naive estimators only (got {})",
                    e.label()
                ));
            }
        }
        Ok(design)
    }

    /// Baseline fractions actually simulated.
    pub fn fractions(&self) -> Vec<f64> {
        if self.baseline_fraction_grid.is_empty() {
            vec![1.0]
        } else {
            self.baseline_fraction_grid.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring output settings.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output = OutputSpec::default();
        let bytes = serde_json::to_vec(&semantic).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::presets;

    #[test]
    fn round_trip_and_strictness() {
        let cfg = presets::fig1_config(10);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["replicatez"] = 3.into();
        assert!(matches!(
            ScenarioConfig::from_json(&v.to_string()),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let cfg = presets::fig1_config(10);
        let mut out = cfg.clone();
        out.output.dir = Some("/tmp/x".into());
        out.output.per_replicate_rows = false;
        assert_eq!(cfg.hash(), out.hash());
        let mut seed = cfg.clone();
        seed.master_seed += 1;
        assert_ne!(cfg.hash(), seed.hash());
        let mut reps = cfg.clone();
        reps.replicates += 1;
        assert_ne!(cfg.hash(), reps.hash());
    }

    #[test]
    fn validation_errors() {
        let mut cfg = presets::fig1_config(10);
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = presets::fig1_config(10);
        cfg.baseline_fraction_grid = vec![0.2];
        assert!(cfg.validate().is_err());
        let mut cfg = presets::fig1_config(10);
        cfg.shift_grid.push(ShiftSpec::new(vec![0.5, 0.6]));
        assert!(cfg.validate().is_err());
    }
}
