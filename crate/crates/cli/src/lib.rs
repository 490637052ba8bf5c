//! Batch front-end: experiment configs, replicated runs, CSV output and a
//! checksummed manifest.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod run;

pub use config::{parse_config, to_toml, ConfigError, ExperimentConfig, ExperimentKind, ModelConfig};
pub use run::{run_experiment, RunError, RunReport};
