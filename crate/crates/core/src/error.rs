use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is singular or not positive definite (eigenvalue {eigenvalue:e})")]
    Singular { eigenvalue: f64 },

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined statistic: {0}")]
    Degenerate(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite {what} in layer {layer}")]
    NonFiniteLayer { what: &'static str, layer: usize },

    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    /// Stable identifier printed by the command-line tool.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::DimensionMismatch { .. } => "E_DIMENSION",
            Error::NotSquare { .. } => "E_NOT_SQUARE",
            Error::NotSymmetric { .. } => "E_NOT_SYMMETRIC",
            Error::Singular { .. } => "E_SINGULAR",
            Error::RankOutOfRange { .. } => "E_RANK",
            Error::InvalidArgument(_) => "E_INVALID_ARGUMENT",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::LabelOutOfRange { .. } => "E_LABEL",
            Error::NonFiniteLayer { .. } => "E_NONFINITE_LAYER",
            Error::NonFiniteGradient { .. } => "E_NONFINITE_GRADIENT",
            Error::Stage { source, .. } => source.code(),
            Error::Io { .. } => "E_IO",
            Error::Format { .. } => "E_FORMAT",
        }
    }

    /// Innermost pipeline stage the error was raised in, if tagged.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// File the error refers to, if any.
    pub fn path(&self) -> Option<&Path> {
        match self {
            Error::Stage { source, .. } => source.path(),
            Error::Io { path, .. } | Error::Format { path, .. } => Some(path),
            _ => None,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Error {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Error {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Error {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
