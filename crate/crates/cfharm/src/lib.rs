//! Files, configuration and commands around `cfharm-core`.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use error::{CliError, CliResult};

/// Output root: `$CFHARM_OUT`, or `runs` in the working directory.
pub fn output_root() -> std::path::PathBuf {
    std::env::var_os("CFHARM_OUT")
        .map(Into::into)
        .unwrap_or_else(|| "runs".into())
}
