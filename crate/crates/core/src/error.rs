use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("truncated blob: expected {expected} bytes, found {actual}")]
    TruncatedBlob { expected: usize, actual: usize },

    #[error("version mismatch: file has format version {found}, this build reads {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
