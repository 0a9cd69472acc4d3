use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("turn index {index} out of range for dialog of length {len}")]
    TurnOutOfRange { index: usize, len: usize },

    #[error("passage {0:?} has no sentences")]
    EmptyPassage(String),

    #[error("input contains the reserved mask literal {literal:?} ({context})")]
    ReservedLiteral { literal: String, context: String },

    #[error("generation failed for dialog {dialog_id:?} at step {step}: {message}")]
    Generation {
        dialog_id: String,
        step: usize,
        message: String,
    },

    #[error("malformed dialog {dialog_id:?}: {message}")]
    DialogShape { dialog_id: String, message: String },

    #[error("degenerate embedding: {0}")]
    Degenerate(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown metric {0:?}")]
    UnknownMetric(String),

    #[error("undefined agreement: {0}")]
    UndefinedAgreement(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Attaches `path` to an I/O error.
    pub(crate) fn at(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for failures that originate in a generator backend.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Generation { .. })
    }
}
