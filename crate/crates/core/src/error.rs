use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to any gradient-tracked input")]
    Detached,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("divergence at iteration {iteration}: loss is not finite")]
    Divergence { iteration: usize },

    #[error("too few distinct samples: need {needed}, found {found}")]
    TooFewDistinct { needed: usize, found: usize },

    #[error("index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("symbol {0} has no codeword")]
    MissingCodeword(usize),

    #[error("all symbol frequencies are zero")]
    EmptyAlphabet,

    #[error("code length {0} exceeds the supported maximum")]
    CodeTooLong(usize),

    #[error("bit stream truncated")]
    Truncated,

    #[error("invalid prefix in bit stream")]
    InvalidPrefix,

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {0}")]
    Version(u16),

    #[error("content hash mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    HashMismatch { stored: u64, computed: u64 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("model mismatch: blob expects {expected:#018x}, bundle is {actual:#018x}")]
    ModelMismatch { expected: u64, actual: u64 },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("model has no discriminator")]
    MissingDiscriminator,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(e) => Error::Io(e),
            other => Error::Format(other.to_string()),
        }
    }
}
