use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RclError>;

#[derive(Debug, Error)]
pub enum RclError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("degenerate feature row {row} (norm {norm:e})")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("configuration error in `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl RclError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        RclError::Dimension { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        RclError::Contract { op, detail: detail.into() }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        RclError::Config { field: field.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RclError::Io { path: path.into(), source }
    }

    /// True for errors caused by user-supplied configuration rather than a failure at runtime.
    pub fn is_config(&self) -> bool {
        matches!(self, RclError::Config { .. } | RclError::Parameter(_))
    }
}
