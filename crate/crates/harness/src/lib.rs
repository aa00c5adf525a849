//! Experiment harness: TOML-configured adaptation runs, redundancy sweeps,
//! CSV/JSONL reporting and static plots.

pub mod config;
pub mod error;
pub mod plot;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{ExperimentConfig, Overrides};
pub use error::{HarnessError, Result};
pub use run::{run_experiment, run_job, JobResult};
pub use sweep::{redundancy_sweep, SweepRow, SweepSpec};
