use thiserror::Error;

/// Failure families used across the crate. The CLI maps each family to a
/// distinct exit code, so keep new errors inside an existing variant where
/// possible.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar argument is out of its legal range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Model or run configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset layout or labelling problems.
    #[error("dataset error: {0}")]
    Data(String),

    /// Malformed on-disk payload (weights file, image file, metadata).
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
