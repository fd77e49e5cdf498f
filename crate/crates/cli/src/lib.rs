//! Command-line front end for the osmosis restoration pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod render;

pub use commands::{Command, RunContext};
pub use config::RunConfig;
pub use error::{CliError, Result};
pub use manifest::RunManifest;
