//! Library side of the `opssplit` executable: configuration resolution and
//! the subcommands, callable without spawning a process.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{config_hash, load, resolve, RunConfig};
pub use error::{CliError, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_PARTIAL};
