//! Training ReLU-activated implicit networks with a scaled equilibrium layer.
//!
//! The hidden representation is the fixed point `Z = relu(gamma * Z A + Phi)` with
//! `Phi = relu(X W)` and prediction `y_hat = Z b`. A fixed scalar `gamma` keeps the
//! layer a contraction, gradients come from the implicit function theorem through a
//! matrix-free adjoint solve, and the [`init`] and [`trainer`] modules check and monitor
//! the sufficient conditions under which full-batch gradient descent converges linearly.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the crate-root aliases
//! fix the scalar to `f64`, which is what the convergence checks are calibrated for.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod equilibrium;
pub mod error;
pub mod implicit_grad;
pub mod init;
pub mod kron;
pub mod model;
pub mod scalar;
pub mod spectral;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

/// Dense column-major matrix.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense column vector.
pub type Vector = nalgebra::DVector<f64>;

pub type Params = model::Params<f64>;
pub type Dataset = model::Dataset<f64>;
pub type SolveOptions = equilibrium::SolveOptions<f64>;
pub type EquilibriumState = equilibrium::EquilibriumState<f64>;
pub type Gradients = implicit_grad::Gradients<f64>;
pub type AdjointState = implicit_grad::AdjointState<f64>;
pub type Evaluation = implicit_grad::Evaluation<f64>;
pub type GramDiagnostics = spectral::GramDiagnostics<f64>;
pub type InitReport = init::InitReport<f64>;
pub type LambdaStarEstimate = init::LambdaStarEstimate<f64>;
pub type TrainConfig = trainer::TrainConfig<f64>;
pub type TrainLog = trainer::TrainLog<f64>;
pub type TrainRow = trainer::TrainRow<f64>;
pub type FdOptions = verify::FdOptions<f64>;
