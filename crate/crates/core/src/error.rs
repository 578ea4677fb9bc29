use thiserror::Error;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "matrix is not positive definite ({context}); condition number estimate {condition:.3e}"
    )]
    NotPositiveDefinite { context: String, condition: f64 },

    #[error("model does not expose a normalised log-density")]
    NotNormalised,

    #[error("log-density is -inf or NaN at the initial point")]
    InvalidInitialPoint,

    #[error("importance weights collapsed after refresh at β = {beta:.4e}: mean ESS fraction {ess_fraction:.4} ({} completed steps)", trace.len())]
    EssCollapse {
        beta: f64,
        ess_fraction: f64,
        /// `(β_t, ĉ(β_t))` of the steps completed before the collapse.
        trace: Vec<(f64, f64)>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
