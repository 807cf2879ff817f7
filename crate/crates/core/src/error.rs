use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke an operation's shape or argument contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("insufficient history: need {needed}, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    /// AR(1) slope outside (0, 1); the series is not mean reverting.
    #[error("series is not mean reverting (AR(1) slope {slope})")]
    NotMeanReverting { slope: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("degenerate portfolio: raw weights have L1 norm {0:e}")]
    DegeneratePortfolio(f64),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    TrainingDiverged { epoch: usize, step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by malformed input data rather than configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Io(_)
                | Error::NonFinite(_)
                | Error::DegenerateInput(_)
                | Error::InsufficientHistory { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
