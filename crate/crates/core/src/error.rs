use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {msg}")]
    Shape { op: String, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("layer `{layer}`: {msg}")]
    Weights { layer: String, msg: String },

    #[error("bad magic {found:?}, expected \"YOFW\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("file was written big-endian; refusing to byte-swap")]
    ByteOrder,

    #[error("truncated input at byte {offset}: {what}")]
    Truncated { offset: usize, what: &'static str },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data: {0}")]
    Data(String),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Format,
    Data,
    Io,
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape { op: op.into(), msg: msg.into() }
    }

    pub(crate) fn weights(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Weights { layer: layer.into(), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Graph(_) | Error::Weights { .. } => ErrorKind::Config,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::ByteOrder
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Malformed(_)
            | Error::Parse { .. } => ErrorKind::Format,
            Error::Shape { .. } | Error::Data(_) | Error::Image { .. } => ErrorKind::Data,
            Error::Io { .. } => ErrorKind::Io,
        }
    }
}
