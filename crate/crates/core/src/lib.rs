//! Simulation and asymptotic inference for supercritical multitype
//! branching processes: seeded trajectory generation at three observation
//! granularities, mean and covariance estimation, confidence regions built
//! from the martingale limit theory, and a replication harness that checks
//! the limit laws by Monte Carlo.

pub mod blockmat;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod montecarlo;
pub mod process;

pub use error::{Error, Result};

/// Concrete matrix type used throughout the stochastic layers.
pub type Matrix64 = blockmat::Matrix<f64>;
/// Single-precision alias for callers that want the generic kernels only.
pub type Matrix32 = blockmat::Matrix<f32>;
