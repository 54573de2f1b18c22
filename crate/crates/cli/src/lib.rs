//! Experiment harness: configuration, runs and artifact files for the
//! `hypergrad` binary.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig, Mode, RegularizerSpec};
pub use run::{run, run_with_threads, RunError, Summary};
