//! File formats, configuration, parallel lanes and subcommands for the
//! `qcore` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod runner;
pub mod tables;

pub use error::{CliError, Result};
