use thiserror::Error;

/// Errors produced by the liprcp library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid risk level alpha={alpha} for n={n}: need 1/(n+1) <= alpha < 1")]
    InvalidRisk { alpha: f64, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{method} bounds are not available for the {score} score; use the tight method")]
    UnsupportedMethod {
        method: &'static str,
        score: &'static str,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
