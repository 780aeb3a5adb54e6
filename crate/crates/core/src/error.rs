use thiserror::Error;

/// Errors raised across the estimation library.
///
/// `Validation` covers malformed inputs (bad shapes, invalid files, config
/// mismatches); `Numerical` covers failures during computation such as a
/// non-finite ELBO or a failed Cholesky factorization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The ELBO or its gradient became non-finite during optimisation. The
    /// trace up to that point is kept for diagnosis.
    #[error("optimisation diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        trace: Box<crate::vi::TraceLog>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures that stem from computation rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
