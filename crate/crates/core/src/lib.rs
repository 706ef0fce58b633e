//! Simulation engine and estimator library for interim futility analysis when
//! the interim population drifts away from the target population.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the shared domain types and design validation.
//! * [`datagen`] builds cohorts and draws interim / baseline subsets.
//! * [`estimators`] computes stratum summaries, post-stratified means,
//!   hierarchical and mixed-model fits, and treatment-effect estimates.
//! * [`futility`] evaluates posterior- and predictive-probability rules.
//! * [`screening`] runs the subsampling chi-square shift screen.
//! * [`metrics`] provides Wasserstein distances and stop-probability summaries.
//! * [`harness`] wires everything into deterministic scenario runs and
//!   figure presets.

pub mod datagen;
pub mod estimators;
pub mod futility;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod screening;

pub use model::{
    Allocation, Arm, BetaPrior, Endpoint, EstimatorKind, EstimatorSpec, FutilityKind,
    FutilityRuleSpec, ModelSpec, PatientRecord, ProportionSource, Randomization, ShiftSpec,
    SiteSpec, SubgroupSpec, TrialDesign, ValidatedDesign,
};
