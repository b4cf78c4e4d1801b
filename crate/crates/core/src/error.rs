use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("dataset failed validation: {0}")]
    Validation(String),

    #[error("degenerate target `{0}`: zero variance")]
    DegenerateTarget(String),

    #[error("oracle columns are required for {0}")]
    MissingOracle(&'static str),

    #[error("weak residual treatment variation: mean (d - m_hat)^2 = {denom:e} below {threshold:e}")]
    WeakResidualVariation { denom: f64, threshold: f64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

/// Coarse classification used by the command-line exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::Schema(_)
            | Error::Validation(_)
            | Error::MissingOracle(_)
            | Error::Parse { .. } => ErrorClass::Validation,
            Error::DegenerateTarget(_)
            | Error::WeakResidualVariation { .. }
            | Error::TrainingDiverged { .. }
            | Error::Numerical(_) => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
