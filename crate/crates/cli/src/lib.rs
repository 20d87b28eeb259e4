//! Command-line front end: config files, trace CSVs, SVG plots and the
//! simulate / fit / gsi / denoise workflows.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod trace_io;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
