use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric: max asymmetry {0}")]
    NotSymmetric(f64),

    #[error("matrix is singular or nearly singular: smallest eigenvalue {min_eig} below floor {floor}")]
    NearSingular { min_eig: f64, floor: f64 },

    #[error("matrix is not primitive (no power up to the Wielandt bound is positive)")]
    NotPrimitive,

    #[error("iteration did not converge within {0} steps")]
    NoConvergence(usize),

    #[error("invalid probability law: {0}")]
    InvalidLaw(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("population cap of {cap} exceeded at generation {generation}")]
    PopulationCap { cap: u64, generation: usize },

    #[error("observation level {have:?} is insufficient for {estimator} (requires {need:?})")]
    ObservationLevel {
        have: crate::process::ObservationLevel,
        need: crate::process::ObservationLevel,
        estimator: String,
    },

    #[error("type {0} was never observed as a parent (zero cumulative population)")]
    UnseenType(usize),

    #[error("model violates assumptions: {0}")]
    Assumption(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
