//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or bounds mismatch between volumes, patches, or parameter blocks.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value or argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed on-disk data; `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A voxel was not covered by any patch during reassembly.
    #[error("coverage error: voxel ({0}, {1}, {2}) not covered by any patch")]
    Coverage(usize, usize, usize),

    /// Phantom or cohort generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Numeric failure during training (non-finite loss or gradient).
    #[error("training error: {0}")]
    Training(String),

    /// Missing or inconsistent inputs during evaluation.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
