//! Spectral estimators and the prediction-dynamics Gram matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::equilibrium::EquilibriumState;
use crate::error::{shape, Error, Result};
use crate::kron::{assemble_q, check_dense_size, unvec};
use crate::model::Params;
use crate::scalar::{lit, to_f64, Real};

/// Seed used by [`operator_norm`].
pub const DEFAULT_POWER_SEED: u64 = 0x0005_eed0_fa11;

/// Tolerance used when the library needs `||A||` for a contraction check.
pub const NORM_TOL: f64 = 1e-12;

/// Largest singular value by power iteration on `M^T M`.
pub fn operator_norm<T: Real>(m: &DMatrix<T>, tol: T) -> T {
    operator_norm_seeded(m, tol, DEFAULT_POWER_SEED)
}

/// Power iteration from a seeded Gaussian start.
///
/// Stops once the Rayleigh residual `||M^T M v - theta v||` drops below `sqrt(tol) * theta`,
/// which bounds the relative error of `theta` by roughly `tol` when the top singular value
/// is separated. After `10 * max(rows, cols)` iterations it falls back to a dense SVD.
pub fn operator_norm_seeded<T: Real>(m: &DMatrix<T>, tol: T, seed: u64) -> T {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return T::zero();
    }
    if m.iter().all(|x| *x == T::zero()) {
        return T::zero();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::<T>::from_fn(cols, |_, _| {
        let s: f64 = StandardNormal.sample(&mut rng);
        lit(s)
    });
    let vn = v.norm();
    if vn > T::zero() {
        v /= vn;
    }
    let threshold = tol.sqrt();
    let cap = 10 * rows.max(cols);
    for _ in 0..cap {
        let mv = m * &v;
        let w = m.tr_mul(&mv);
        let theta = v.dot(&w);
        let wn = w.norm();
        if !(theta > T::zero()) || !(wn > T::zero()) {
            break;
        }
        let residual = (&w - &v * theta).norm();
        if residual <= threshold * theta {
            return theta.sqrt();
        }
        v = w / wn;
    }
    largest_singular_value(m)
}

pub fn singular_values<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    m.clone().svd(false, false).singular_values
}

pub fn largest_singular_value<T: Real>(m: &DMatrix<T>) -> T {
    singular_values(m).iter().copied().fold(T::zero(), |acc, s| acc.max(s))
}

/// `sigma_N(M)` for an `N x m` matrix with `N <= m`, from a dense SVD.
pub fn smallest_singular_value<T: Real>(m: &DMatrix<T>) -> Result<T> {
    let (rows, cols) = m.shape();
    if rows > cols || rows == 0 {
        return Err(Error::ShapeError { rows, cols });
    }
    Ok(singular_values(m)
        .iter()
        .copied()
        .fold(T::max_value().unwrap_or_else(|| lit(f64::MAX)), |acc, s| acc.min(s)))
}

pub fn min_eigenvalue<T: Real>(sym: &DMatrix<T>) -> T {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(T::max_value().unwrap_or_else(|| lit(f64::MAX)), |acc, s| acc.min(s))
}

/// Snapshot of `H = Z Z^T + M M^T + Pi Pi^T`.
#[derive(Debug, Clone)]
pub struct GramDiagnostics<T: Real> {
    pub h: DMatrix<T>,
    pub lambda_min_h: T,
    /// Smallest singular value of `Z`; zero when `N > m`.
    pub sigma_min_z: T,
    /// Minimum eigenvalues of `Z Z^T`, `M M^T` and `Pi Pi^T`.
    pub components: [T; 3],
}

/// Assembles the Gram matrix that drives the prediction dynamics under gradient flow.
///
/// `G = (b^T kron I_N) Q^{-1}` is obtained from `N` solves with the dense `Q^T`; the rows of
/// `M = gamma G D (I_m kron Z)` and `Pi = G D E (I_m kron X)` are formed through the
/// reshapes `vec(Z^T (D o G_i))` and `vec(X^T (E o D o G_i))`.
pub fn gram_matrix<T: Real>(
    state: &EquilibriumState<T>,
    params: &Params<T>,
    x: &DMatrix<T>,
) -> Result<GramDiagnostics<T>> {
    let (n, m) = state.z.shape();
    check_dense_size(n, m)?;
    if params.m() != m || x.nrows() != n || x.ncols() != params.d() {
        return Err(shape("gram_matrix", format!("N={n}, m={m}"), "mismatched inputs"));
    }
    let gamma_norm = params.gamma * operator_norm(&params.a, lit(NORM_TOL));
    if gamma_norm >= T::one() {
        return Err(Error::NonContractive {
            gamma_norm: to_f64(gamma_norm),
        });
    }

    let q = assemble_q(&state.d_mask, &params.a, params.gamma);
    let lu = q.transpose().lu();
    let b_kron = DMatrix::from_column_slice(m, 1, params.b.as_slice()).kronecker(&DMatrix::<T>::identity(n, n));
    let gt = lu.solve(&b_kron).ok_or(Error::Singular)?;

    let d = x.ncols();
    let mut m_rows = DMatrix::<T>::zeros(n, m * m);
    let mut pi_rows = DMatrix::<T>::zeros(n, d * m);
    for i in 0..n {
        let gi = unvec(&gt.column(i).into_owned(), n, m);
        let dg = state.d_mask.component_mul(&gi);
        let mi = (state.z.transpose() * &dg) * params.gamma;
        let pii = x.transpose() * state.e_mask.component_mul(&dg);
        m_rows.row_mut(i).copy_from_slice(mi.as_slice());
        pi_rows.row_mut(i).copy_from_slice(pii.as_slice());
    }

    let zz = &state.z * state.z.transpose();
    let mm = &m_rows * m_rows.transpose();
    let pp = &pi_rows * pi_rows.transpose();
    let h = &zz + &mm + &pp;
    let sigma_min_z = if n <= m {
        smallest_singular_value(&state.z)?
    } else {
        T::zero()
    };
    Ok(GramDiagnostics {
        lambda_min_h: min_eigenvalue(&h),
        components: [min_eigenvalue(&zz), min_eigenvalue(&mm), min_eigenvalue(&pp)],
        sigma_min_z,
        h,
    })
}
