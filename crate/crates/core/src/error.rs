use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An atom location or finite-variation jump time does not sit on a grid node.
    #[error("grid alignment: {0}")]
    Alignment(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented precondition was violated (e.g. signed measure passed to an
    /// inequality check, boundary-zero convention broken).
    #[error("precondition: {0}")]
    Precondition(String),

    /// NaN/infinity, blow-up past the divergence threshold, or a singular solve.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
