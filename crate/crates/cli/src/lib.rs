//! Scenario files, stage execution and report emission for the `sdelab` binary.

pub mod builtins;
pub mod config;
pub mod emit;
pub mod run;

pub use config::{ConfigError, Prepared, Scenario};
pub use emit::{emit, EmitError, Format};
pub use run::{run_scenario, Artifacts, Report, RunOptions, StageSet};
