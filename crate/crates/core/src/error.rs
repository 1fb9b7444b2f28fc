use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic bytes in {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or unreadable files.
    pub fn is_format_or_io(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::CorruptHeader(_)
                | Error::Truncated(_)
                | Error::Parse { .. }
                | Error::Io { .. }
        )
    }
}
