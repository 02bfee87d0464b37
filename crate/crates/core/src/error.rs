use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("layer is not a contraction: gamma * ||A|| = {gamma_norm} >= 1")]
    NonContractive { gamma_norm: f64 },
    #[error("fixed-point iteration did not converge: {iterations} iterations, residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("adjoint solve did not converge: {iterations} iterations, residual {residual:e}")]
    UnconvergedAdjoint { iterations: usize, residual: f64 },
    #[error("closed-form equilibrium needs a nonnegative A, found A[{row}, {col}] = {value}")]
    NegativeEntries { row: usize, col: usize, value: f64 },
    #[error("linear system is singular")]
    Singular,
    #[error("dense assembly refused: N*m = {size} exceeds {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("smallest singular value needs rows <= cols, got {rows}x{cols}")]
    ShapeError { rows: usize, cols: usize },
    #[error("width m = {m} is smaller than the sample count N = {n}")]
    WidthTooSmall { m: usize, n: usize },
    #[error("gamma0 = gamma * lambda2 = {gamma0} must be below 1")]
    GammaTooLarge { gamma0: f64 },
    #[error("features are degenerate: sigma_min(Phi(0)) = {sigma_min:e}")]
    DegenerateFeatures { sigma_min: f64 },
    #[error("no beta up to {cap:e} satisfies the gradient-descent conditions")]
    BetaCapExceeded { cap: f64 },
    #[error("step size {eta:e} exceeds the certified bound {eta_max:e}")]
    StepSizeRejected { eta: f64, eta_max: f64 },
    #[error("a pre-activation lies within {margin:e} of the ReLU kink (|value| = {value:e})")]
    KinkProximity { margin: f64, value: f64 },
    #[error("bad IDX magic in {path:?}")]
    BadMagic { path: PathBuf },
    #[error("truncated IDX file {path:?}: need {needed} bytes, have {have}")]
    TruncatedFile {
        path: PathBuf,
        needed: usize,
        have: usize,
    },
    #[error("unsupported IDX type code 0x{code:02x} in {path:?}")]
    UnsupportedTypeCode { path: PathBuf, code: u8 },
    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientClassSamples {
        class: u8,
        available: usize,
        requested: usize,
    },
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
