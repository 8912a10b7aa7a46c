use std::io;
use std::path::Path;

use serde::Serialize;
use sparse_tune::analysis::AnalysisError;
use sparse_tune::engine::EngineError;
use sparse_tune::param::{ContainerError, ParamError};
use sparse_tune::synth::SynthError;
use sparse_tune::transfer::TransferError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("{0}")]
    FingerprintMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: io::Error) -> CliError {
        if e.kind() == io::ErrorKind::NotFound {
            CliError::MissingFile(path.display().to_string())
        } else {
            CliError::Failed(format!("{}: {}", path.display(), e))
        }
    }

    /// Process exit status; 0 is reserved for success.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::FingerprintMismatch(_) => 4,
            CliError::Invalid(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Failed(_) => "failed",
            CliError::Usage(_) => "usage",
            CliError::MissingFile(_) => "missing-file",
            CliError::FingerprintMismatch(_) => "fingerprint-mismatch",
            CliError::Invalid(_) => "invalid-input",
        }
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            code: u8,
            message: String,
        }
        let message = self.to_string().replace(['\n', '\r'], " ");
        serde_json::to_string(&Line {
            error: self.kind(),
            code: self.exit_code(),
            message,
        })
        .expect("serializable error")
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        if e.is_fingerprint_mismatch() {
            return CliError::FingerprintMismatch(e.to_string());
        }
        match e {
            TransferError::Io { path, source } if source.kind() == io::ErrorKind::NotFound => {
                CliError::MissingFile(path)
            }
            TransferError::Container(_)
            | TransferError::Synth(_)
            | TransferError::Config(_)
            | TransferError::Param(_)
            | TransferError::Engine(EngineError::Config(_) | EngineError::BudgetTooLarge { .. }) => {
                CliError::Invalid(e.to_string())
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Transfer(t) => t.into(),
            AnalysisError::Param(ParamError::FingerprintMismatch { .. }) => {
                CliError::FingerprintMismatch(e.to_string())
            }
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        TransferError::from(e).into()
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        TransferError::from(e).into()
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        TransferError::from(e).into()
    }
}
