use std::path::PathBuf;

use groupcap_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("record `{record}`, field `{field}`: {message}")]
    Load {
        record: String,
        field: &'static str,
        message: String,
    },
    #[error("grouping: {0}")]
    Grouping(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("decode: {0}")]
    Decode(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("training: {0}")]
    Training(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(record: impl Into<String>, field: &'static str, message: impl Into<String>) -> Self {
        Error::Load {
            record: record.into(),
            field,
            message: message.into(),
        }
    }
}
