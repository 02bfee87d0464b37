//! Forward pass: Picard iteration for `Z = relu(gamma Z A + Phi)`, the closed form for
//! entrywise-nonnegative `A`, and the contraction and parameter-perturbation diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::model::{feature_map, Params};
use crate::scalar::{lit, relu, relu_prime, to_f64, Real};
use crate::spectral::{operator_norm, NORM_TOL};

/// Stopping rule for the fixed-point solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions<T: Real> {
    /// Threshold on the Frobenius distance between successive iterates.
    pub tol: T,
    pub max_iter: usize,
    /// When set, the threshold is `tol * max(1, scale)` with `scale` the Frobenius norm of
    /// the constant term (`Phi` forward, `r b^T` for the adjoint).
    pub relative: bool,
    /// Verify `gamma * ||A|| < 1` before iterating.
    pub check_contraction: bool,
}

impl<T: Real> SolveOptions<T> {
    /// `1e-10 * max(1, ||Phi||_F)`, generous iteration cap, contraction verified.
    pub fn strict() -> Self {
        Self {
            tol: lit(1e-10),
            max_iter: 10_000,
            relative: true,
            check_contraction: true,
        }
    }

    /// Absolute `1e-2` with at most 100 iterations, the protocol of the reported experiments.
    pub fn experiment() -> Self {
        Self {
            tol: lit(1e-2),
            max_iter: 100,
            relative: false,
            check_contraction: false,
        }
    }

    pub fn absolute(tol: T, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            relative: false,
            check_contraction: false,
        }
    }

    pub fn with_contraction_check(mut self, check: bool) -> Self {
        self.check_contraction = check;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > T::zero()) {
            return Err(Error::InvalidOptions("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidOptions("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_tol(&self, scale: T) -> T {
        if self.relative {
            self.tol * scale.max(T::one())
        } else {
            self.tol
        }
    }
}

/// Result of a forward solve.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumState<T: Real> {
    pub z: DMatrix<T>,
    /// `relu'(gamma Z A + Phi)` at the returned `Z`.
    pub d_mask: DMatrix<T>,
    /// `relu'(X W)`, equivalently the support of `Phi`.
    pub e_mask: DMatrix<T>,
    pub iterations: usize,
    /// Last `||Z^(l+1) - Z^(l)||_F`.
    pub residual: T,
    pub converged: bool,
    /// Every successive-iterate distance, in order.
    pub residual_trace: Vec<T>,
}

impl<T: Real> EquilibriumState<T> {
    pub fn into_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                residual: to_f64(self.residual),
            })
        }
    }
}

pub(crate) fn ensure_contractive<T: Real>(params: &Params<T>) -> Result<T> {
    let gamma_norm = params.gamma * operator_norm(&params.a, lit(NORM_TOL));
    if gamma_norm >= T::one() {
        return Err(Error::NonContractive {
            gamma_norm: to_f64(gamma_norm),
        });
    }
    Ok(gamma_norm)
}

/// Picard iteration from `Z^0 = 0`.
pub fn solve_forward<T: Real>(
    params: &Params<T>,
    phi: &DMatrix<T>,
    opts: &SolveOptions<T>,
) -> Result<EquilibriumState<T>> {
    solve_forward_from(params, phi, opts, None)
}

/// Picard iteration from `warm_start` (or zero). An unconverged solve is returned with
/// `converged == false`; call [`EquilibriumState::into_converged`] to turn it into an error.
pub fn solve_forward_from<T: Real>(
    params: &Params<T>,
    phi: &DMatrix<T>,
    opts: &SolveOptions<T>,
    warm_start: Option<&DMatrix<T>>,
) -> Result<EquilibriumState<T>> {
    opts.validate()?;
    let m = params.m();
    if phi.ncols() != m {
        return Err(shape("solve_forward", format!("Phi with {m} columns"), format!("{}", phi.ncols())));
    }
    if opts.check_contraction {
        ensure_contractive(params)?;
    }
    let tol = opts.effective_tol(phi.norm());
    let gamma = params.gamma;

    let mut z = match warm_start {
        Some(z0) if z0.shape() == phi.shape() => z0.clone(),
        Some(z0) => {
            return Err(shape(
                "solve_forward",
                format!("warm start {}x{}", phi.nrows(), m),
                format!("{}x{}", z0.nrows(), z0.ncols()),
            ))
        }
        None => DMatrix::zeros(phi.nrows(), m),
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut residual = T::zero();
    for _ in 0..opts.max_iter {
        let next = (&z * &params.a * gamma + phi).map(relu);
        residual = (&next - &z).norm();
        trace.push(residual);
        z = next;
        if residual <= tol {
            converged = true;
            break;
        }
        if !residual.is_finite() {
            break;
        }
    }

    let pre = &z * &params.a * gamma + phi;
    Ok(EquilibriumState {
        d_mask: pre.map(relu_prime),
        e_mask: phi.map(relu_prime),
        iterations: trace.len(),
        residual,
        converged,
        residual_trace: trace,
        z,
    })
}

/// `Z = Phi (I - gamma A)^{-1}`, valid when `A >= 0` entrywise and `gamma ||A|| < 1`.
///
/// Solved as `(I - gamma A)^T Z^T = Phi^T` by LU; no inverse is formed.
pub fn closed_form_equilibrium<T: Real>(phi: &DMatrix<T>, a: &DMatrix<T>, gamma: T) -> Result<DMatrix<T>> {
    let m = a.nrows();
    if a.ncols() != m || phi.ncols() != m {
        return Err(shape(
            "closed_form_equilibrium",
            format!("square A matching Phi's {} columns", phi.ncols()),
            format!("A {}x{}", a.nrows(), a.ncols()),
        ));
    }
    for col in 0..m {
        for row in 0..m {
            let v = a[(row, col)];
            if v < T::zero() {
                return Err(Error::NegativeEntries {
                    row,
                    col,
                    value: to_f64(v),
                });
            }
        }
    }
    let system = (DMatrix::<T>::identity(m, m) - a * gamma).transpose();
    let zt = system.lu().solve(&phi.transpose()).ok_or(Error::Singular)?;
    // (I - gamma A)^{-1} is a nonnegative Neumann series, so negatives here are roundoff.
    Ok(zt.transpose().map(relu))
}

/// Ratios of consecutive residuals; a zero denominator yields a zero ratio.
pub fn contraction_diagnostics<T: Real>(residual_trace: &[T]) -> Result<Vec<T>> {
    if residual_trace.len() < 2 {
        return Err(Error::InvalidOptions("residual trace needs at least two entries".into()));
    }
    let floor: T = lit(1e-300);
    Ok(residual_trace
        .windows(2)
        .map(|w| if w[0] < floor { T::zero() } else { w[1] / w[0] })
        .collect())
}

/// Bound and observed distance between two equilibria.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lemma4Gap<T: Real> {
    pub bound: T,
    pub actual: T,
}

/// Compares `||Z_a - Z_b||_F` against
/// `||X||_F / (1 - g0) * [g0 / (1 - g0) * l1 / l2 * ||A_a - A_b|| + ||W_a - W_b||]`
/// with `l1 = max ||W||`, `l2 = max ||A||` and `g0 = gamma * l2`.
#[allow(clippy::too_many_arguments)]
pub fn lemma4_gap<T: Real>(
    wa: &DMatrix<T>,
    aa: &DMatrix<T>,
    wb: &DMatrix<T>,
    ab: &DMatrix<T>,
    x: &DMatrix<T>,
    gamma: T,
    opts: &SolveOptions<T>,
) -> Result<Lemma4Gap<T>> {
    let tol: T = lit(NORM_TOL);
    let lambda1 = operator_norm(wa, tol).max(operator_norm(wb, tol));
    let lambda2 = operator_norm(aa, tol).max(operator_norm(ab, tol));
    let gamma0 = gamma * lambda2;
    if gamma0 >= T::one() {
        return Err(Error::NonContractive {
            gamma_norm: to_f64(gamma0),
        });
    }
    let opts = opts.with_contraction_check(false);
    let solve = |w: &DMatrix<T>, a: &DMatrix<T>| -> Result<DMatrix<T>> {
        let params = Params::new(w.clone(), a.clone(), DVector::zeros(w.ncols()), gamma)?;
        let phi = feature_map(x, w)?;
        Ok(solve_forward(&params, &phi, &opts)?.into_converged()?.z)
    };
    let actual = (solve(wa, aa)? - solve(wb, ab)?).norm();

    let one = T::one();
    let a_term = if lambda2 > T::zero() {
        gamma0 / (one - gamma0) * lambda1 / lambda2 * operator_norm(&(aa - ab), tol)
    } else {
        T::zero()
    };
    let bound = x.norm() / (one - gamma0) * (a_term + operator_norm(&(wa - wb), tol));
    Ok(Lemma4Gap { bound, actual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..1.0))
    }

    fn params_with(a: DMatrix<f64>, gamma: f64) -> Params<f64> {
        let m = a.nrows();
        Params::new(DMatrix::zeros(1, m), a, DVector::zeros(m), gamma).unwrap()
    }

    /// Nonnegative `A` scaled so that `gamma ||A|| = target`.
    fn nonneg_instance(seed: u64, n: usize, m: usize, target: f64) -> (DMatrix<f64>, Params<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = uniform(&mut rng, n, m, 0.0);
        let a = uniform(&mut rng, m, m, 0.0);
        let a = &a / operator_norm(&a, 1e-14);
        (phi, params_with(a, target))
    }

    #[test]
    fn zero_a_converges_in_two_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = uniform(&mut rng, 3, 4, 0.0);
        let state = solve_forward(&params_with(DMatrix::zeros(4, 4), 0.5), &phi, &SolveOptions::strict()).unwrap();
        assert!(state.converged);
        assert_eq!(state.iterations, 2);
        assert_eq!(state.z, phi);
    }

    #[test]
    fn zero_features_converge_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = uniform(&mut rng, 3, 3, -1.0);
        let gamma = 0.5 / operator_norm(&a, 1e-14);
        let state = solve_forward(&params_with(a, gamma), &DMatrix::zeros(2, 3), &SolveOptions::strict()).unwrap();
        assert_eq!(state.iterations, 1);
        assert_eq!(state.z, DMatrix::zeros(2, 3));
    }

    #[test]
    fn picard_matches_closed_form_on_nonnegative_a() {
        let (phi, params) = nonneg_instance(3, 2, 3, 0.5);
        let state = solve_forward(&params, &phi, &SolveOptions::strict()).unwrap();
        let closed = closed_form_equilibrium(&phi, &params.a, params.gamma).unwrap();
        assert!((state.z - closed).norm() < 1e-8);
    }

    #[test]
    fn closed_form_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = uniform(&mut rng, 3, 4, 0.0);
        assert!((closed_form_equilibrium(&phi, &DMatrix::zeros(4, 4), 0.3).unwrap() - &phi).norm() < 1e-15);

        let col = uniform(&mut rng, 5, 1, 0.0);
        let z = closed_form_equilibrium(&col, &DMatrix::from_element(1, 1, 1.5), 0.4).unwrap();
        assert!((z - &col / (1.0 - 0.6)).norm() < 1e-14);

        let c = 2.0;
        let gamma = 0.3;
        let a = DMatrix::<f64>::identity(4, 4) * c;
        let closed = closed_form_equilibrium(&phi, &a, gamma).unwrap();
        assert!((&closed - &phi / (1.0 - gamma * c)).norm() < 1e-13);
        let picard = solve_forward(&params_with(a, gamma), &phi, &SolveOptions::strict()).unwrap();
        assert!((picard.z - closed).norm() < 1e-8);
    }

    #[test]
    fn closed_form_rejects_negative_entries() {
        let mut a = DMatrix::<f64>::identity(2, 2);
        a[(1, 0)] = -0.1;
        assert!(matches!(
            closed_form_equilibrium(&DMatrix::zeros(1, 2), &a, 0.1),
            Err(Error::NegativeEntries { row: 1, col: 0, .. })
        ));
    }

    #[test]
    fn strict_mode_refuses_non_contractive_layer() {
        let a = DMatrix::<f64>::identity(3, 3) * 4.0;
        let err = solve_forward(&params_with(a, 0.3), &DMatrix::zeros(2, 3), &SolveOptions::strict());
        assert!(matches!(err, Err(Error::NonContractive { .. })));
    }

    #[test]
    fn capped_solve_is_flagged() {
        let (phi, params) = nonneg_instance(5, 3, 4, 0.9);
        let state = solve_forward(&params, &phi, &SolveOptions::absolute(1e-12, 3)).unwrap();
        assert!(!state.converged);
        assert_eq!(state.iterations, 3);
        assert!(matches!(state.into_converged(), Err(Error::NotConverged { iterations: 3, .. })));
    }

    #[test]
    fn warm_start_reaches_same_fixed_point() {
        let (phi, params) = nonneg_instance(6, 3, 4, 0.5);
        let cold = solve_forward(&params, &phi, &SolveOptions::strict()).unwrap();
        let warm = solve_forward_from(&params, &phi, &SolveOptions::strict(), Some(&cold.z)).unwrap();
        assert!(warm.iterations <= 2);
        assert!((warm.z - cold.z).norm() < 1e-9);
    }

    #[test]
    fn contraction_ratio_examples() {
        assert_eq!(contraction_diagnostics(&[1.0, 0.5, 0.25]).unwrap(), vec![0.5, 0.5]);
        let g: f64 = 0.37;
        let trace: Vec<f64> = (0..6).map(|k| g.powi(k)).collect();
        for r in contraction_diagnostics(&trace).unwrap() {
            assert!((r - g).abs() < 1e-15);
        }
        assert_eq!(contraction_diagnostics(&[0.0, 1.0]).unwrap(), vec![0.0]);
        assert!(contraction_diagnostics(&[1.0]).is_err());
    }

    #[test]
    fn solver_residuals_contract_at_the_layer_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi = uniform(&mut rng, 4, 5, 0.0);
        let a = uniform(&mut rng, 5, 5, -1.0);
        let gamma = 0.5 / operator_norm(&a, 1e-14);
        let state = solve_forward(&params_with(a, gamma), &phi, &SolveOptions::strict()).unwrap();
        let ratios = contraction_diagnostics(&state.residual_trace).unwrap();
        assert!(ratios.iter().all(|r| *r <= 0.5 + 1e-9));
    }

    #[test]
    fn lemma4_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = uniform(&mut rng, 3, 2, -1.0);
        let w = uniform(&mut rng, 2, 4, -1.0);
        let a = uniform(&mut rng, 4, 4, -1.0);
        let gamma = 0.5 / operator_norm(&a, 1e-14);
        let opts = SolveOptions::strict();
        let same = lemma4_gap(&w, &a, &w, &a, &x, gamma, &opts).unwrap();
        assert_eq!(same.actual, 0.0);
        assert!(same.bound.abs() < 1e-15);

        let dw = uniform(&mut rng, 2, 4, -1.0) * 0.1;
        let wb = &w + &dw;
        let gap = lemma4_gap(&w, &a, &wb, &a, &x, gamma, &opts).unwrap();
        let expected = x.norm() * operator_norm(&dw, 1e-14) / (1.0 - 0.5);
        assert!((gap.bound - expected).abs() < 1e-9 * expected);
        assert!(gap.actual <= gap.bound);

        for _ in 0..10 {
            let wb = &w + uniform(&mut rng, 2, 4, -1.0) * 0.3;
            let ab = &a + uniform(&mut rng, 4, 4, -1.0) * 0.3;
            let gamma = 0.5 / operator_norm(&a, 1e-14).max(operator_norm(&ab, 1e-14));
            let gap = lemma4_gap(&w, &a, &wb, &ab, &x, gamma, &opts).unwrap();
            assert!(gap.actual <= gap.bound + 1e-8);
        }
    }

    proptest! {
        #[test]
        fn closed_form_and_picard_agree(seed in 0u64..10_000, n in 1usize..5, m in 1usize..6, g in 0.05f64..0.9) {
            let (phi, params) = nonneg_instance(seed, n, m, g);
            let opts = SolveOptions::strict();
            let state = solve_forward(&params, &phi, &opts).unwrap();
            prop_assert!(state.converged);
            let closed = closed_form_equilibrium(&phi, &params.a, params.gamma).unwrap();
            let tol = opts.effective_tol(phi.norm());
            prop_assert!((&state.z - &closed).norm() <= 10.0 * tol);
            prop_assert!(state.z.norm() <= phi.norm() / (1.0 - g) + tol);
            prop_assert!(state.z.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn masks_follow_preactivation_signs(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(&mut rng, 3, 2, -1.0);
            let w = uniform(&mut rng, 2, 4, -1.0);
            let a = uniform(&mut rng, 4, 4, -1.0);
            let gamma = 0.5 / operator_norm(&a, 1e-14);
            let params = Params::new(w.clone(), a, DVector::zeros(4), gamma).unwrap();
            let phi = feature_map(&x, &w).unwrap();
            let s1 = solve_forward(&params, &phi, &SolveOptions::strict()).unwrap();
            let s2 = solve_forward(&params, &phi, &SolveOptions::strict()).unwrap();
            prop_assert_eq!(&s1, &s2);
            let pre = &s1.z * &params.a * gamma + &phi;
            let xw = &x * &w;
            for i in 0..pre.len() {
                prop_assert_eq!(s1.d_mask[i], if pre[i] > 0.0 { 1.0 } else { 0.0 });
                prop_assert_eq!(s1.e_mask[i], if xw[i] > 0.0 { 1.0 } else { 0.0 });
            }
            let fixed_point_gap = (&s1.z - pre.map(relu)).norm();
            prop_assert!(fixed_point_gap <= SolveOptions::<f64>::strict().effective_tol(phi.norm()) * 1.5);
        }
    }
}
