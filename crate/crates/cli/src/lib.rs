//! Experiment harness around `smp-core`: configuration, presets, run
//! records and the batch commands behind the `smp-lab` binary.

pub mod commands;
pub mod config;
pub mod presets;
pub mod record;
pub mod report;
