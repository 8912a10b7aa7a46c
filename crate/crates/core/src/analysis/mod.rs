//! Density sweeps over task and language budgets, and pairwise mask overlap.

mod overlap;
mod sweep;

use thiserror::Error;

use crate::param::ParamError;
use crate::transfer::TransferError;

pub use overlap::{expected_random_overlap, overlap_matrix, OverlapMatrix};
pub use sweep::{
    density_sweep, sweep_threads, SweepCell, SweepGrid, SweepLanguage, SweepSuite, THREADS_ENV,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid density levels: {0}")]
    Levels(String),
    #[error("invalid {var}: {value:?}")]
    Threads { var: &'static str, value: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}
