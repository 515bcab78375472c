use thiserror::Error;

/// Errors produced by fitting, Monte Carlo inference and data ingestion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{context}: line {line}: {message}")]
    Parse {
        context: String,
        line: u64,
        message: String,
    },

    #[error("fit did not converge: {0}")]
    Convergence(String),

    #[error("endpoint bracket failed: {0}")]
    BracketFailed(String),

    #[error("pivot solving failed: {0}")]
    PivotFailed(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for errors caused by malformed user input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::Parse { .. } | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
