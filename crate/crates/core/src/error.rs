use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the synthesis pipeline.
///
/// Variants are grouped by the module that raises them so the CLI can print
/// a categorized error line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema: {0}")]
    Schema(String),

    #[error("transform: {0}")]
    Transform(String),

    #[error("cond: {0}")]
    Cond(String),

    #[error("tensor: {0}")]
    Tensor(String),

    #[error("tensor: shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("nets: {0}")]
    Nets(String),

    #[error("train: {0}")]
    Train(String),

    #[error("train: non-finite {which} loss at iteration {iteration}")]
    NonFiniteLoss { which: &'static str, iteration: usize },

    #[error("monitor: {0}")]
    Monitor(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("format: {0}")]
    Format(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Transform(_) => "transform",
            Error::Cond(_) => "cond",
            Error::Tensor(_) | Error::Shape { .. } => "tensor",
            Error::Nets(_) => "nets",
            Error::Train(_) | Error::NonFiniteLoss { .. } => "train",
            Error::Monitor(_) => "monitor",
            Error::Eval(_) => "eval",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Format(_) => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
