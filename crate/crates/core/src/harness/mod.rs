//! Scenario runner, configuration, output files and paper presets.

pub mod config;
pub mod engine;
pub mod output;
pub mod presets;

pub use config::{ConfigError, OutputSpec, ScenarioConfig};
pub use engine::{
    cutoff_study, run_scenario, tune_hybrid_cutoff, write_scenario, AggregateRow, Cell, CutoffCurve,
    CutoffStudy, ReplicateRow, ScenarioResult,
};
pub use output::Manifest;
pub use presets::{reproduce_figure, shrinkage_curves, FigureId, ReproduceError};
