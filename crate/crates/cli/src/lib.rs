//! Experiment runner for `robustlab`: TOML configs, presets, run manifests
//! and replay.

pub mod config;
pub mod error;
pub mod manifest;
pub mod presets;
pub mod run;

pub use error::CliError;
