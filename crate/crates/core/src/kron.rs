//! Dense Kronecker-form assembly used by the desk-scale oracles and the Gram diagnostic.
//!
//! `vec` stacks columns, which is exactly nalgebra's storage order. With that convention
//! `(A^T kron I_N) vec(U) = vec(U A)` and `diag(vec M) vec(U) = vec(M o U)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest `N * m` for which dense `Nm x Nm` assembly is allowed.
pub const DENSE_LIMIT: usize = 4096;

pub fn check_dense_size(n: usize, m: usize) -> Result<()> {
    let size = n * m;
    if size > DENSE_LIMIT {
        return Err(Error::TooLarge {
            size,
            limit: DENSE_LIMIT,
        });
    }
    Ok(())
}

pub fn vec_cols<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec<T: Real>(v: &DVector<T>, rows: usize, cols: usize) -> DMatrix<T> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// `diag(vec(mask))`.
pub fn diag_of<T: Real>(mask: &DMatrix<T>) -> DMatrix<T> {
    DMatrix::from_diagonal(&vec_cols(mask))
}

/// `Q = I_{Nm} - gamma * D (A^T kron I_N)`.
pub fn assemble_q<T: Real>(d_mask: &DMatrix<T>, a: &DMatrix<T>, gamma: T) -> DMatrix<T> {
    let n = d_mask.nrows();
    let nm = d_mask.len();
    let d = diag_of(d_mask);
    let at_kron_i = a.transpose().kronecker(&DMatrix::<T>::identity(n, n));
    DMatrix::<T>::identity(nm, nm) - (d * at_kron_i) * gamma
}
