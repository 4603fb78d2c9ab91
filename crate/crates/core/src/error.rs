use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum DdatError {
    #[error("{path}: {error}")]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },

    #[error("{path}: file is empty or has no data rows")]
    EmptyFile { path: PathBuf },

    #[error("{path}: row {row}: expected {expected} columns, found {found}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    BadCell {
        path: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("undefined statistic: {0}")]
    Degenerate(String),

    #[error("least-squares system is rank deficient and ridge fallback is disabled")]
    RankDeficient,

    #[error("{stage}: {inner}")]
    Stage {
        stage: String,
        inner: Box<DdatError>,
    },
}

impl DdatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DdatError::Io {
            path: path.into(),
            error: source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DdatError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        DdatError::InvalidArgument(message.into())
    }

    /// Wraps the error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        DdatError::Stage {
            stage: stage.into(),
            inner: Box::new(self),
        }
    }
}

pub type Result<T, E = DdatError> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(DdatError::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

/// Attaches a stage name to any error in a result.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
