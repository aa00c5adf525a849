use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("selection is empty: {0}")]
    EmptySelection(String),

    #[error("non-finite value in {0}")]
    NonFiniteLoss(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model has no normalization layers")]
    NoNormLayers,

    #[error("corruption `{0}` has no native implementation; supply a pre-corrupted archive")]
    UnsupportedCorruption(String),

    #[error("class {class} has {available} samples, {required} required")]
    InsufficientSamples {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {step} is not after the last recorded step {last}")]
    StepOrder { step: u64, last: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
