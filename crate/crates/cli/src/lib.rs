//! Experiment harness: config documents and the commands behind the `scl`
//! binary.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate, cmd_compare, cmd_eval, cmd_synth, cmd_train, exit_code, ComparisonRow, Ctx, PartialFailure, RunFile,
};
pub use config::{DatasetSource, RunConfig, SCHEMA_VERSION};
