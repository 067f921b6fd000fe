//! Pipeline behind the `mma` binary: dataset generation, training,
//! decoding, evaluation, alignment dumps and ablation grids.

pub mod config;
pub mod run;

pub use config::{resolve, RunConfig};
pub use run::{run, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Failure while doing the work; exit code 2.
    #[error(transparent)]
    Core(#[from] mma_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}
