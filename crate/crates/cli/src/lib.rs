//! Command implementations behind the `kneexr` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod plot;
pub mod run;

pub use commands::*;
pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use run::{Context, RunManifest};
