//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdsmError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(
        "ellipticity violation: smallest eigenvalue {lambda_min:.3e} of the \
         {size}x{size} diffusion matrix is not positive"
    )]
    EllipticityViolation { lambda_min: f64, size: usize },

    #[error("quadrature did not converge: {context} (last change {last_change:.3e})")]
    QuadratureNonConvergence { context: String, last_change: f64 },

    #[error("covariance factorization failed: eigenvalue {0:.3e} below clamping floor")]
    FactorizationFailure(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown observable id: {0}")]
    UnknownObservable(String),

    #[error("dimension {0} not supported here (local time requires d <= 3)")]
    DimensionUnsupported(usize),

    #[error("mismatched configuration ids: particle side {0:?}, dual side {1:?}")]
    MismatchedConfig(String, String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SdsmError>;
