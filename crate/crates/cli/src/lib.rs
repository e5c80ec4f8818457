//! Command-line front end for `copiv-core`: CSV ingestion, JSON
//! configuration, pipeline orchestration and artifact output.

pub mod commands;
pub mod config;
pub mod io;
pub mod pipeline;

use copiv_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("output error: {0}")]
    Output(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration and input problems, 3 for violated identifying
    /// assumptions, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) | CliError::Io(_) | CliError::Output(_) => 2,
            CliError::Core(e) if e.is_assumption() => 3,
            CliError::Core(Error::Invalid(_) | Error::Precondition(_) | Error::Budget { .. }) => 2,
            CliError::Core(_) => 4,
        }
    }
}
