use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid pooling window {window} for {height}x{width} field (must be odd, >= 1, <= min side)")]
    InvalidWindow {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),

    #[error("covariance is not positive semidefinite (eigenvalue {0:.3e} below tolerance)")]
    NotPsd(f64),

    #[error("guidance weight outside [0, 1]: {0}")]
    WeightRange(f64),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
