use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("batch too small: batch norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("oracle size limit: naive estimator accepts at most {max} samples, got {got}")]
    OracleSize { max: usize, got: usize },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("unknown category {value:?} in column {column:?}")]
    Vocabulary { column: String, value: String },

    #[error("missing value in column {column:?} at data row {row}")]
    MissingValue { column: String, row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
        /// Parameters as of the last finite step.
        checkpoint: Box<crate::network::ModelParams>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
