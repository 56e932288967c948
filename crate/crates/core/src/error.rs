use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("metric not positive definite at {location}: {detail}")]
    NotPositiveDefinite { location: String, detail: String },
    #[error("dimension {dim} exceeds cap {cap} ({what})")]
    DimensionCap { dim: usize, cap: usize, what: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no convergence in {what}: achieved {achieved:.3e} (target {target:.3e})")]
    Convergence { what: String, achieved: f64, target: f64 },
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
