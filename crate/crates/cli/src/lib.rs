//! Command-line driver for `refine-core`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 non-finite loss.

pub mod cli;
pub mod config;
pub mod convert;
pub mod error;
pub mod eval;
pub mod files;
pub mod manifest;
pub mod sweep;
pub mod synth;
pub mod train;

pub use cli::run;
pub use error::{CliError, CliResult};
