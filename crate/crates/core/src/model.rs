//! Parameters, the ReLU feature map, prediction and the squared loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::scalar::{relu, to_f64, Real};

/// Trainable weights `(W, A, b)` together with the fixed scale `gamma`.
///
/// `W` is `d x m`, `A` is `m x m` and shared by every implicit layer, `b` has length `m`.
/// `gamma` is never updated by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T: Real> {
    pub w: DMatrix<T>,
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub gamma: T,
}

impl<T: Real> Params<T> {
    pub fn new(w: DMatrix<T>, a: DMatrix<T>, b: DVector<T>, gamma: T) -> Result<Self> {
        let params = Self { w, a, b, gamma };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.w.ncols();
        if self.a.nrows() != m || self.a.ncols() != m {
            return Err(shape(
                "Params",
                format!("A {m}x{m}"),
                format!("A {}x{}", self.a.nrows(), self.a.ncols()),
            ));
        }
        if self.b.len() != m {
            return Err(shape("Params", format!("b of length {m}"), format!("{}", self.b.len())));
        }
        if !(self.gamma > T::zero() && self.gamma < T::one()) {
            return Err(Error::InvalidParams(format!(
                "gamma = {} must lie in (0, 1)",
                to_f64(self.gamma)
            )));
        }
        let finite = |x: &T| x.is_finite();
        if !(self.w.iter().all(finite) && self.a.iter().all(finite) && self.b.iter().all(finite)) {
            return Err(Error::InvalidParams("non-finite entry".into()));
        }
        Ok(())
    }

    /// Input dimension `d`.
    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    /// Width `m`.
    pub fn m(&self) -> usize {
        self.w.ncols()
    }

    /// Multiplies `W`, `A` and `b` by `beta`, keeping `gamma`.
    pub fn scaled(&self, beta: T) -> Self {
        Self {
            w: &self.w * beta,
            a: &self.a * beta,
            b: &self.b * beta,
            gamma: self.gamma,
        }
    }
}

/// Training inputs, one row of `x` per sample, and scalar targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T: Real> {
    pub x: DMatrix<T>,
    pub y: DVector<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: DMatrix<T>, y: DVector<T>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidData("dataset needs at least one sample".into()));
        }
        if x.nrows() != y.len() {
            return Err(shape(
                "Dataset",
                format!("{} targets", x.nrows()),
                format!("{}", y.len()),
            ));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// `Phi = relu(X W)`.
pub fn feature_map<T: Real>(x: &DMatrix<T>, w: &DMatrix<T>) -> Result<DMatrix<T>> {
    if x.ncols() != w.nrows() {
        return Err(shape(
            "feature_map",
            format!("W with {} rows", x.ncols()),
            format!("{}x{}", w.nrows(), w.ncols()),
        ));
    }
    Ok((x * w).map(relu))
}

/// `y_hat = Z b`.
pub fn predict<T: Real>(z: &DMatrix<T>, b: &DVector<T>) -> Result<DVector<T>> {
    if z.ncols() != b.len() {
        return Err(shape(
            "predict",
            format!("b of length {}", z.ncols()),
            format!("{}", b.len()),
        ));
    }
    Ok(z * b)
}

/// `L = 1/2 ||y_hat - y||^2`.
pub fn loss<T: Real>(yhat: &DVector<T>, y: &DVector<T>) -> Result<T> {
    if yhat.len() != y.len() {
        return Err(shape("loss", format!("length {}", y.len()), format!("{}", yhat.len())));
    }
    let half: T = crate::scalar::lit(0.5);
    Ok((yhat - y).norm_squared() * half)
}
