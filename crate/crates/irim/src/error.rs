use thiserror::Error;

#[derive(Debug, Error)]
pub enum IrimError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("degenerate Householder vector at index {index}: norm {norm:.3e} <= {eps:.3e}")]
    DegenerateHouseholder { index: usize, norm: f64, eps: f64 },
    #[error("infeasible configuration: {0}")]
    Config(String),
    #[error("inverse reconstruction drift {drift:.3e} exceeds bound {bound:.3e} at step {step}")]
    ReconstructionDrift { step: usize, drift: f64, bound: f64 },
    #[error("checksum mismatch for {path}: expected {expected}, got {got}")]
    Checksum {
        path: String,
        expected: String,
        got: String,
    },
    #[error("{context}: value {value:.3e} exceeds tolerance {bound:.3e}")]
    Tolerance {
        context: String,
        value: f64,
        bound: f64,
    },
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IrimError>;

impl IrimError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        IrimError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
