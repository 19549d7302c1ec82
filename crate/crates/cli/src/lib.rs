//! File-based pipeline around `prosody-core`: label extraction, predictor
//! training, prediction and evaluation with hash-chained run manifests.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod manifest;
pub mod synth;
pub mod target;

pub use config::{Project, ProjectConfig};
pub use error::{CliError, CliResult};
