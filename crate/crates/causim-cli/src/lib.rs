//! Command-line front end: document ingestion, subcommand dispatch, and
//! report emission for the causal-order protocol toolkit.

pub mod docs;
pub mod runner;

pub use runner::{execute, parse_command, run_cli, CommandOutput};
