use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum SgarError {
    /// A vector's L2 norm fell below the configured floor; normalizing it
    /// would amplify noise into a meaningless direction.
    #[error("vector norm {norm:e} at or below floor {floor:e}")]
    NormUnderflow { norm: f64, floor: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Eq. style: positive anchors were required but none matched any family.
    #[error("no positive anchors for a non-empty family set")]
    EmptyAnchors,

    #[error("no proxy registered for label {0}")]
    MissingProxy(i64),

    #[error("backward cache does not match forward shapes: {0}")]
    StaleCache(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid dataset: {0}")]
    Validation(String),

    #[error("train split has {available} usable classes, batch spec needs {needed}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("unknown sweep parameter {0:?} (expected lambda, gamma, alpha, delta, tau or n)")]
    UnknownParam(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SgarError>;
