use thiserror::Error;

/// Failure classes shared by every module. The CLI maps each class to a
/// distinct exit code, so new variants must be added there as well.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("resource error: {0}")]
    Resource(String),

    /// A modelling hypothesis (dissipativity, decay bound, ...) does not hold.
    #[error("hypothesis violated: {inequality}: {detail}")]
    Hypothesis { inequality: String, detail: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// An experiment ran but its measured outcome contradicts the predicted bound.
    #[error("diagnostic failure: {0}")]
    Diagnostic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn hypothesis(inequality: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Hypothesis {
            inequality: inequality.into(),
            detail: detail.into(),
        }
    }
}
