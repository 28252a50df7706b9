use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("Cholesky factorization failed even with jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("backward pass failed: regularization exceeded {0:e}")]
    Regularization(f64),

    #[error("initial rollout is not finite")]
    NonFiniteRollout,

    #[error("equilibrium solver did not converge (best residual {best_residual:e})")]
    Equilibrium { best_residual: f64 },

    #[error("vehicle left the path corridor (lateral error {0:.3} m)")]
    OffPath(f64),

    #[error("path specification error: {0}")]
    Path(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, DriftError>;
