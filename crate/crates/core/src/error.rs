use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unreadable input stream `{source_name}`: {reason}")]
    UnreadableStream { source_name: String, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid likelihood table: {0}")]
    LikelihoodTable(String),

    #[error("class {label} has {count} rows; at least 5 are required for a 3:1:1 split")]
    TooFewRows { label: String, count: usize },

    #[error("row has {got} features but the model expects {expected}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("training data must contain both classes")]
    SingleClass,

    #[error("brute-force Shapley refuses {0} features (limit 12)")]
    TooManyFeatures(usize),

    #[error("model format error at line {line}: {reason}")]
    ModelFormat { line: usize, reason: String },

    #[error("cohort format error at line {line}: {reason}")]
    CohortFormat { line: usize, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
