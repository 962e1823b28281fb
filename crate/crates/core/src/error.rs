use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("no convergence in {what} (best residual {best_residual:.3e})")]
    NoConvergence { what: String, best_residual: f64 },
    #[error("non-finite field at cell ({ix}, {iy}) at t = {t} ps")]
    NonFinite { ix: usize, iy: usize, t: f64 },
    #[error("trajectory {id}: {source}")]
    Trajectory {
        id: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!("{name} is not finite ({v})")))
    }
}
