use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. Variants map one-to-one onto the
/// error classes the file formats and operations promise to callers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, unknown version or an unrecognized enum tag in a binary file.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// The file ended early or carries trailing garbage.
    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    /// A model, index or container was built against a different layout.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("incompatible containers: {0}")]
    IncompatibleContainer(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("no candidates left after filtering: {0}")]
    NoCandidates(String),

    /// A label set references an id the container does not hold.
    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-friendly name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::Corruption(_) => "corruption",
            Error::Format(_) => "format",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Compatibility(_) => "compatibility",
            Error::IncompatibleContainer(_) => "incompatible-container",
            Error::Parse(_) => "parse",
            Error::NoCandidates(_) => "no-candidates",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
        }
    }
}
