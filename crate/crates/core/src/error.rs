use std::path::PathBuf;

use crate::windows::Window;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor write failed at byte offset {offset}: {source}")]
    TensorWrite {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Length { expected: u64, actual: u64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch in {file}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        file: PathBuf,
        expected: (u32, u32),
        actual: (u32, u32),
    },

    #[error("frame sequence error: missing {missing}")]
    Sequence { missing: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("hot-tier capacity {capacity} is smaller than window size {window_size}")]
    Capacity { capacity: usize, window_size: usize },

    #[error("residency violation: {0}")]
    Residency(String),

    #[error("missing output for window {0}")]
    Completeness(Window),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("plugin error ({plugin}): {message}")]
    Plugin { plugin: String, message: String },

    #[error("insufficient frames: need at least 2, got {0}")]
    InsufficientFrames(usize),

    #[error("missing flow for frame pair {pair}")]
    MissingFlow { pair: String },

    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config {
        line: Option<usize>,
        key: Option<String>,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape(format!("{op}: {a:?} vs {b:?}"))
    }

    pub fn is_plugin(&self) -> bool {
        matches!(self, Error::Plugin { .. })
    }

    /// Wraps a plugin error with where in the loop it happened.
    pub(crate) fn with_plugin_context(self, context: impl std::fmt::Display) -> Self {
        match self {
            Error::Plugin { plugin, message } => Error::Plugin {
                plugin,
                message: format!("{context}: {message}"),
            },
            other => other,
        }
    }
}
