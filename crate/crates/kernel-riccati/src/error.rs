use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid density specification: {0}")]
    InvalidDensity(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),

    /// The effective control-cost matrix `N̂(Γ_t)` dropped below its
    /// positivity floor. This points at a too-coarse discretization rather
    /// than a solver defect, so the solve aborts with the offending time.
    #[error("control-cost matrix floor violated at t = {time:.6}: min eigenvalue {min_eig:.6e} < floor {floor:.6e}")]
    NhatFloor { time: f64, min_eig: f64, floor: f64 },

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
