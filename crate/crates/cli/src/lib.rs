//! Library side of the `wpg` command: runs, artifacts and experiments.

pub mod cli;
pub mod experiments;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] wpg_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("geodesic did not converge ({0})")]
    NotConverged(String),
    #[error("{0}")]
    Other(String),
}
