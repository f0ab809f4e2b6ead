//! File formats, stage drivers and the `fos` command-line tool built on
//! `fos-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod stages;

pub use error::{CliError, Result};
