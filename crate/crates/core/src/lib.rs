//! Covariance steering for discrete-time Markov jump linear systems.
//!
//! The crate synthesizes mode-dependent affine feedback policies
//! `u_k(i) = ū_k(i) + K_k(i)(x_k − x̄_k(i))` that steer the state mean to a
//! target and the state covariance into a terminal bound, optionally under
//! state and control chance constraints, and validates the resulting
//! policies by Monte Carlo simulation.
//!
//! Module map:
//!
//! * [`model`]: problem instances, validation and the JSON model format.
//! * [`propagation`]: exact moment propagation, cost evaluation, policy extraction.
//! * [`conic`]: a small conic-program IR with pluggable solver backends.
//! * [`steering`]: the mean and covariance subproblems, chance-constraint
//!   tightenings, the penalized refinement loop and the losslessness check.
//! * [`montecarlo`]: closed-loop sampling and empirical verification.
//! * [`cli`]: the `covsteer` command implementations and artifact export.

// Links the system OpenBLAS used by the SDP routines of the Clarabel backend.
use openblas_src as _;

pub mod benchmark;
pub mod cli;
pub mod conic;
pub mod export;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod propagation;
pub mod steering;

pub use model::{ChanceConstraintSet, MarkovChain, MjlsModel, ModeDynamics};
pub use propagation::{CovarianceTrajectory, MeanTrajectory, Policy};
pub use steering::{SteeringOptions, SteeringSolution};
