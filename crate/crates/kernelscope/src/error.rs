use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration supplied by the caller (bad boxes, counts, flags).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was invoked outside its contract (wrong N, mismatched dims).
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric evaluation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// State became non-finite during integration.
    #[error("trajectory {trajectory} diverged at t = {time}")]
    Divergence { trajectory: usize, time: f64 },

    /// A linear system was too ill-conditioned to solve reliably.
    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted file did not match the documented container format.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
