use thiserror::Error;

/// Errors surfaced by every layer of the lab, from matrix shapes up to the harness.
#[derive(Debug, Error)]
pub enum UlabError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal mass {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("non-finite value in `{tensor}`")]
    NonFinite { tensor: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("pretraining stopped at epoch {epochs} with forget-set MA {ma:.4} below target {target:.4}")]
    MemorizationFailed { epochs: usize, ma: f64, target: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, UlabError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(UlabError::Shape(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(UlabError::Param(msg.into()))
}
