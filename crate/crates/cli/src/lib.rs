//! Pipeline orchestration for the `sparselabel` command: dataset
//! manifests, run configuration, model bundles and the subcommands.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;

pub use error::{CliError, Result};
