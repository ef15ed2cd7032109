use thiserror::Error;

pub type Result<T> = std::result::Result<T, CastError>;

#[derive(Debug, Error)]
pub enum CastError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Gradient norm below the degeneracy threshold; the conflict is undefined.
    #[error("degenerate gradient for {what} (norm {norm:e})")]
    DegenerateGradient { what: String, norm: f64 },

    /// A correlation whose input has zero variance.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CastError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        CastError::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CastError::Config(msg.into())
    }
}
