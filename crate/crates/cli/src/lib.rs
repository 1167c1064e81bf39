//! Command-line surface of the video-to-music pipeline.
//!
//! Each subcommand is also exposed as a function taking its parsed
//! arguments, so pipelines can be driven in-process.

pub mod args;
pub mod commands;
pub mod config;
pub mod data;
pub mod exit;
pub mod manifest;

pub use args::{Cli, Command};
pub use exit::{exit_code, UsageError};

/// Content hash of the sources this binary was built from.
pub const CODE_VERSION: &str = env!("V2M_CODE_VERSION");
