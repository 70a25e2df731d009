//! Command-line front end and HTTP service for the `moemix` engine.

pub mod commands;
pub mod engine;
pub mod error;
pub mod server;

pub use commands::{main_with, run, Cli, Command};
pub use error::{CliError, CliResult};
