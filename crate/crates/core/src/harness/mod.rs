//! Experiment harness: configuration, multi-seed training with early
//! stopping, statistics and report rendering.

pub mod config;
pub mod gradcheck;
pub mod report;
mod run;
mod stats;

pub use config::{ExperimentConfig, Settings, OUT_ENV};
pub use report::{emit_report, format_cell, format_wall, load_results, ReportFormat, SCHEMA_VERSION};
pub use run::{aggregate, mean_accuracy, run_experiment, run_seed, RunResult, SeedResult};
pub use stats::{ci95, mean, sample_std, EarlyStopper};
