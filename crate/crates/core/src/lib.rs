//! Robustness analysis and training for basic recurrent networks under
//! additive Gaussian input noise.
//!
//! The crate propagates input-noise covariance through an RNN with a
//! first-order (EKF-style) linearization, computes Lipschitz upper bounds on
//! the output deviation, and trains networks in four regimes: regular,
//! stable (singular-value clipping of the recurrent matrix), regularized by
//! the covariance estimate, and regularized by the Lipschitz bound. A Monte
//! Carlo harness cross-checks every estimate and bound.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod robustness;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, RngState, Vector};
pub use model::{ActivationKind, Aggregation, LossKind, LossSpec, LossTarget, RnnParams, Trajectory};
pub use robustness::{BoundReport, CovarianceTrace, NoiseSpec};
pub use train::{GradientSet, Regime, TrainConfig, TrainLog};
