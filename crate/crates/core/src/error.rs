use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("autograd contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("instance too large for exhaustive enumeration: {0} sequences")]
    TooLarge(u64),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
