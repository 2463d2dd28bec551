use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: malformed JSON line: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown {kind} {value:?}{context}")]
    UnknownLabel {
        kind: &'static str,
        value: String,
        context: String,
    },

    #[error("example {id:?} lists category {category:?} more than once")]
    DuplicateCategory { id: String, category: String },

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("model input error: {0}")]
    ModelInput(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("scorer failed on {context}: {message}")]
    Scorer { context: String, message: String },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f64, epoch: usize, step: usize },

    #[error("classifier head has not been trained")]
    UntrainedHead,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{method} does not support task {task}")]
    Unsupported { method: String, task: String },

    #[error("synthetic corpus config: {0}")]
    Synth(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }
}
