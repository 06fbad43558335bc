//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error enum.
///
/// Trace-format failures carry the byte offset at which parsing or
/// validation failed so external dump producers can locate bad bytes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected length {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{context} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("need at least {required} layers, got {actual}")]
    InsufficientLayers { required: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at byte 0: expected \"PADT\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported trace version {found} at byte {offset} (supported: {supported})")]
    UnsupportedVersion {
        found: u32,
        offset: usize,
        supported: u32,
    },

    #[error("trace length mismatch at byte {offset}: expected {expected} bytes, found {actual}")]
    TraceLength {
        offset: usize,
        expected: u64,
        actual: u64,
    },

    #[error("trace validation failed at byte {offset}: {message}")]
    TraceValidation { offset: usize, message: String },
}

impl Error {
    /// Stable machine-readable tag for wire transport and exit-code mapping.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InsufficientLayers { .. } => "insufficient_layers",
            Error::Config(_) => "config",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::TraceLength { .. } => "trace_length",
            Error::TraceValidation { .. } => "trace_validation",
        }
    }

    /// True for errors caused by the caller's data or parameters rather
    /// than by the environment; servers map these to client-error status.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
