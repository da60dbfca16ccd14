//! Library side of the `mttrack` command line: run configuration and one
//! function per subcommand.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod oracle;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
