//! Persistence, configuration and commands around [`mulki_core`].

pub mod commands;
pub mod config;
pub mod formats;
pub mod json;

pub use commands::{cmd_ablate, cmd_generate, cmd_pretrain, cmd_report, cmd_run, MetricsFile};
pub use config::{ExperimentConfig, Variant};
