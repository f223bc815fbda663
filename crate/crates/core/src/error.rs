use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("matrix is not Hermitian (max deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("inverse temperature must be non-negative, got {0}")]
    NegativeBeta(f64),

    #[error("ground space is degenerate: spectral gap {gap:.3e} is below tolerance {tol:.3e}")]
    Degenerate { gap: f64, tol: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid quantum state: {0}")]
    InvalidState(String),

    #[error("POVM operators are linearly dependent (Gram condition number {0:.3e})")]
    LinearDependence(f64),

    #[error("outcome table would need {entries} entries, cap is {cap}; use the sampling path instead")]
    TableCap { entries: u128, cap: usize },

    #[error("observable is outside the span of the POVM: {0}")]
    Span(String),

    #[error("POVM is not informationally complete: {0}")]
    NotInformationallyComplete(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
