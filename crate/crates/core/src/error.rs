use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A gain or parameter vector violates strict positivity.
    #[error("stability constraint violated: {0}")]
    Stability(String),

    /// NaN or infinite value encountered.
    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestamp {t} is not after the last recorded timestamp {last}")]
    Ordering { t: f64, last: f64 },

    #[error("least-squares fit is underdetermined: {0} samples, need at least 3")]
    Underdetermined(usize),

    #[error("candidate violates bound {bound} at index {index} (value {value})")]
    Constraint { index: usize, value: f64, bound: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to parse config: {0}")]
    Parse(String),

    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
