//! Command-line front end: run configs, dataset adapters, file formats, and the
//! train / score / evaluate / inject / bench / synth / convert commands.

pub mod adapters;
pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use error::{CliError, CliResult};
