use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("bounds error: requested {requested}, available {available}")]
    Bounds { requested: String, available: String },

    #[error("size error: {0}")]
    Size(String),

    #[error("grid header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error in layer `{layer}`: {msg}")]
    Dimension { layer: String, msg: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("fill error: {0}")]
    Fill(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("augmentation error: {0}")]
    Augmentation(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Structure(_) => "structure",
            Error::Bounds { .. } => "bounds",
            Error::Size(_) => "size",
            Error::HeaderMismatch(_) => "header_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::Numerical(_) => "numerical",
            Error::Metric(_) => "metric",
            Error::Fill(_) => "fill",
            Error::Placement(_) => "placement",
            Error::Augmentation(_) => "augmentation",
            Error::Loss(_) => "loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
