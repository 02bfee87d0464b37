//! Independent gradient oracles for desk-scale instances.
//!
//! Three routes to the same gradient, none sharing code with the matrix-free adjoint:
//! central finite differences of full forward solves, the dense Kronecker system assembled
//! literally, and reverse-mode differentiation of a truncated Picard unroll.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::{solve_forward, SolveOptions};
use crate::error::{Error, Result};
use crate::implicit_grad::{forward_loss, loss_and_gradients_with, EvalOptions, Gradients};
use crate::kron::{assemble_q, check_dense_size, diag_of, unvec};
use crate::model::{feature_map, predict, Dataset, Params};
use crate::scalar::{lit, relu, relu_prime, to_f64, Real};
use crate::spectral::{operator_norm, NORM_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdOptions<T: Real> {
    /// Central-difference step `h`.
    pub step: T,
    /// Smallest admissible `|pre-activation|` at the base point.
    pub kink_margin: T,
}

impl<T: Real> Default for FdOptions<T> {
    fn default() -> Self {
        Self {
            step: lit(1e-6),
            kink_margin: lit(1e-4),
        }
    }
}

impl<T: Real> FdOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > T::zero()) || !(self.kink_margin >= T::zero()) {
            return Err(Error::InvalidOptions("step must be positive and kink_margin nonnegative".into()));
        }
        Ok(())
    }
}

/// Forward tolerance for oracle solves, near the roundoff floor of the Picard residual.
pub fn oracle_solve_options<T: Real>() -> SolveOptions<T> {
    SolveOptions {
        tol: lit(1e-14),
        max_iter: 100_000,
        relative: true,
        check_contraction: true,
    }
}

/// Fails with [`Error::KinkProximity`] unless every entry of `gamma Z A + Phi` and `X W`
/// is farther than `margin` from zero.
pub fn check_mask_stability<T: Real>(
    params: &Params<T>,
    data: &Dataset<T>,
    margin: T,
    opts: &SolveOptions<T>,
) -> Result<()> {
    let xw = &data.x * &params.w;
    let phi = xw.map(relu);
    let z = solve_forward(params, &phi, opts)?.into_converged()?.z;
    let pre = &z * &params.a * params.gamma + &phi;
    for v in xw.iter().chain(pre.iter()) {
        if v.abs() <= margin {
            return Err(Error::KinkProximity {
                margin: to_f64(margin),
                value: to_f64(v.abs()),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Block {
    W,
    A,
    B,
}

fn perturbed<T: Real>(params: &Params<T>, block: Block, index: usize, delta: T) -> Params<T> {
    let mut p = params.clone();
    match block {
        Block::W => p.w[index] += delta,
        Block::A => p.a[index] += delta,
        Block::B => p.b[index] += delta,
    }
    p
}

/// Central differences `(L(theta + h e_i) - L(theta - h e_i)) / 2h` over every coordinate,
/// each loss from a full forward solve with `solve_opts`.
pub fn finite_diff_gradients<T: Real + Send + Sync>(
    params: &Params<T>,
    data: &Dataset<T>,
    fd: &FdOptions<T>,
    solve_opts: &SolveOptions<T>,
) -> Result<Gradients<T>> {
    fd.validate()?;
    check_mask_stability(params, data, fd.kink_margin, solve_opts)?;
    let (d, m) = (params.d(), params.m());
    let coords: Vec<(Block, usize)> = (0..d * m)
        .map(|i| (Block::W, i))
        .chain((0..m * m).map(|i| (Block::A, i)))
        .chain((0..m).map(|i| (Block::B, i)))
        .collect();
    let h = fd.step;
    let two_h = h + h;
    let quotients: Vec<T> = coords
        .par_iter()
        .map(|&(block, i)| {
            let plus = forward_loss(&perturbed(params, block, i, h), data, solve_opts, None)?;
            let minus = forward_loss(&perturbed(params, block, i, -h), data, solve_opts, None)?;
            plus.1.into_converged()?;
            minus.1.into_converged()?;
            Ok((plus.0 - minus.0) / two_h)
        })
        .collect::<Result<_>>()?;
    Ok(Gradients {
        dw: DMatrix::from_column_slice(d, m, &quotients[..d * m]),
        da: DMatrix::from_column_slice(m, m, &quotients[d * m..d * m + m * m]),
        db: DVector::from_column_slice(&quotients[d * m + m * m..]),
    })
}

/// Assembles `D`, `E`, `Q = I - gamma D (A^T kron I_N)` and `(b^T kron I_N)` densely, solves
/// the transposed system by LU and applies the three gradient formulas as written.
pub fn dense_lemma2_gradients<T: Real>(
    params: &Params<T>,
    data: &Dataset<T>,
    solve_opts: &SolveOptions<T>,
) -> Result<Gradients<T>> {
    let (n, m, d) = (data.n(), params.m(), params.d());
    check_dense_size(n, m)?;
    let phi = feature_map(&data.x, &params.w)?;
    let state = solve_forward(params, &phi, solve_opts)?.into_converged()?;
    let r = predict(&state.z, &params.b)? - &data.y;

    let d_diag = diag_of(&state.d_mask);
    let e_diag = diag_of(&state.e_mask);
    let q = assemble_q(&state.d_mask, &params.a, params.gamma);
    let eye_n = DMatrix::<T>::identity(n, n);
    let eye_m = DMatrix::<T>::identity(m, m);
    let b_kron = DMatrix::from_row_slice(1, m, params.b.as_slice()).kronecker(&eye_n);
    let rhs = b_kron.transpose() * &r;
    let u = q.transpose().lu().solve(&rhs).ok_or(Error::Singular)?;

    let dw = (&d_diag * &e_diag * eye_m.kronecker(&data.x)).transpose() * &u;
    let da = (&d_diag * eye_m.kronecker(&state.z)).transpose() * &u * params.gamma;
    Ok(Gradients {
        dw: unvec(&dw, d, m),
        da: unvec(&da, m, m),
        db: state.z.transpose() * r,
    })
}

/// Reverse-mode gradient of the loss through `steps` explicit Picard steps from `Z^0 = 0`.
pub fn unrolled_gradients<T: Real>(params: &Params<T>, data: &Dataset<T>, steps: usize) -> Result<Gradients<T>> {
    if steps == 0 {
        return Err(Error::InvalidOptions("unroll needs at least one step".into()));
    }
    let xw = &data.x * &params.w;
    let phi = xw.map(relu);
    let (n, m) = phi.shape();
    let gamma = params.gamma;

    let mut iterates = Vec::with_capacity(steps + 1);
    let mut masks = Vec::with_capacity(steps);
    iterates.push(DMatrix::<T>::zeros(n, m));
    for l in 0..steps {
        let pre = &iterates[l] * &params.a * gamma + &phi;
        masks.push(pre.map(relu_prime));
        iterates.push(pre.map(relu));
    }
    let z_last = &iterates[steps];
    let r = predict(z_last, &params.b)? - &data.y;

    let mut grad_z = &r * params.b.transpose();
    let mut da = DMatrix::<T>::zeros(m, m);
    let mut dphi = DMatrix::<T>::zeros(n, m);
    let a_t = params.a.transpose();
    for l in (0..steps).rev() {
        let grad_pre = masks[l].component_mul(&grad_z);
        da += iterates[l].tr_mul(&grad_pre) * gamma;
        dphi += &grad_pre;
        grad_z = &grad_pre * &a_t * gamma;
    }
    let e_mask = xw.map(relu_prime);
    Ok(Gradients {
        dw: data.x.tr_mul(&e_mask.component_mul(&dphi)),
        da,
        db: z_last.tr_mul(&r),
    })
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> T {
    let sq = |v: &[T]| v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
    let diff = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y)).sqrt();
    let scale = sq(a).max(sq(b));
    if scale == T::zero() {
        T::zero()
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockErrors {
    pub w: f64,
    pub a: f64,
    pub b: f64,
}

impl BlockErrors {
    pub fn between<T: Real>(x: &Gradients<T>, y: &Gradients<T>) -> Self {
        Self {
            w: to_f64(relative_error(x.dw.as_slice(), y.dw.as_slice())),
            a: to_f64(relative_error(x.da.as_slice(), y.da.as_slice())),
            b: to_f64(relative_error(x.db.as_slice(), y.db.as_slice())),
        }
    }

    pub fn max(&self) -> f64 {
        self.w.max(self.a).max(self.b)
    }
}

/// A desk instance: Gaussian `X`, `W`, `b`, `y`; `gamma = 1/2` and `A` Gaussian rescaled to
/// `gamma ||A|| = gamma0`. Draws are repeated until the masks are stable at `margin`.
pub fn random_instance(
    seed: u64,
    n: usize,
    d: usize,
    m: usize,
    gamma0: f64,
    margin: f64,
) -> Result<(Params<f64>, Dataset<f64>)> {
    if !(gamma0 > 0.0 && gamma0 < 1.0) {
        return Err(Error::GammaTooLarge { gamma0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..1000 {
        let mut draw = |r, c| DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let x = draw(n, d);
        let w = draw(d, m);
        let a = draw(m, m);
        let b = draw(m, 1).column(0).into_owned();
        let y = draw(n, 1).column(0).into_owned();
        let gamma = 0.5;
        let a = &a * (gamma0 / (gamma * operator_norm(&a, NORM_TOL)));
        let params = Params::new(w, a, b, gamma)?;
        let data = Dataset::new(x, y)?;
        match check_mask_stability(&params, &data, margin, &oracle_solve_options()) {
            Ok(()) => return Ok((params, data)),
            Err(e @ Error::KinkProximity { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("loop ran"))
}

#[derive(Debug, Clone, Serialize)]
pub struct OraclePair {
    pub reference: &'static str,
    pub oracle: &'static str,
    pub errors: BlockErrors,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub implicit: Gradients<f64>,
    pub dense: Gradients<f64>,
    pub finite_diff: Gradients<f64>,
    pub unrolled: Gradients<f64>,
    pub pairs: Vec<OraclePair>,
}

/// Compares the production gradient (computed with `adjoint` options) against all three
/// oracles and the oracles against each other.
pub fn grad_check(
    params: &Params<f64>,
    data: &Dataset<f64>,
    adjoint: &SolveOptions<f64>,
    fd: &FdOptions<f64>,
    unroll_steps: usize,
) -> Result<GradCheck> {
    let oracle = oracle_solve_options();
    let eval = EvalOptions {
        forward: oracle,
        adjoint: *adjoint,
        require_converged: true,
    };
    let implicit = loss_and_gradients_with(params, data, &eval, None)?.grads;
    let dense = dense_lemma2_gradients(params, data, &oracle)?;
    let finite_diff = finite_diff_gradients(params, data, fd, &oracle)?;
    let unrolled = unrolled_gradients(params, data, unroll_steps)?;
    let named = [
        ("implicit", &implicit),
        ("dense", &dense),
        ("finite_diff", &finite_diff),
        ("unrolled", &unrolled),
    ];
    let mut pairs = Vec::new();
    for (i, (ra, ga)) in named.iter().enumerate() {
        for (rb, gb) in &named[i + 1..] {
            pairs.push(OraclePair {
                reference: ra,
                oracle: rb,
                errors: BlockErrors::between(ga, gb),
            });
        }
    }
    Ok(GradCheck {
        implicit,
        dense,
        finite_diff,
        unrolled,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::implicit_grad::loss_and_gradients;

    fn instance(seed: u64) -> (Params<f64>, Dataset<f64>) {
        random_instance(seed, 4, 3, 5, 0.5, 1e-4).unwrap()
    }

    fn implicit(p: &Params<f64>, data: &Dataset<f64>) -> Gradients<f64> {
        loss_and_gradients(p, data, &oracle_solve_options()).unwrap().grads
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error::<f64>(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[0.0, 0.0]), 1.0);
        assert!((relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 29.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fd_at_zero_residual_is_tiny() {
        let (p, mut data) = instance(1);
        let phi = feature_map(&data.x, &p.w).unwrap();
        let z = solve_forward(&p, &phi, &oracle_solve_options()).unwrap().z;
        data.y = predict(&z, &p.b).unwrap();
        let g = finite_diff_gradients(&p, &data, &FdOptions::default(), &oracle_solve_options()).unwrap();
        let worst = g.dw.iter().chain(g.da.iter()).chain(g.db.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst <= 1e-7, "{worst}");
    }

    #[test]
    fn fd_bias_gradient_is_exact() {
        // Unit-norm rows keep the loss O(1), so roundoff in the quotient stays near 1e-10.
        let (p, data) = (2..)
            .find_map(|seed| {
                let (p, mut data) = instance(seed);
                data.x = crate::data::normalize_rows(&data.x).unwrap();
                check_mask_stability(&p, &data, 1e-4, &oracle_solve_options()).ok().map(|_| (p, data))
            })
            .unwrap();
        let g = finite_diff_gradients(&p, &data, &FdOptions::default(), &oracle_solve_options()).unwrap();
        let exact = implicit(&p, &data).db;
        assert!((&g.db - &exact).amax() <= 1e-8, "{:e}", (g.db - exact).amax());
    }

    #[test]
    fn fd_matches_implicit() {
        for seed in 0..5 {
            let (p, data) = instance(seed);
            let g = finite_diff_gradients(&p, &data, &FdOptions::default(), &oracle_solve_options()).unwrap();
            let e = BlockErrors::between(&g, &implicit(&p, &data));
            assert!(e.max() < 1e-5, "seed {seed}: {e:?}");
        }
    }

    #[test]
    fn fd_refuses_points_near_a_kink() {
        let (p, data) = instance(3);
        let huge = FdOptions {
            step: 1e-6,
            kink_margin: 1e6,
        };
        assert!(matches!(
            finite_diff_gradients(&p, &data, &huge, &oracle_solve_options()),
            Err(Error::KinkProximity { .. })
        ));
    }

    #[test]
    fn fd_error_is_second_order_in_the_step() {
        // L is quadratic in W and b once the masks are fixed, so only the A block carries
        // truncation error; a larger gamma0 makes it dominate the solver noise.
        let (p, data) = random_instance(4, 4, 3, 5, 0.9, 1e-3).unwrap();
        let exact = implicit(&p, &data).da;
        let err = |h: f64| {
            let fd = FdOptions {
                step: h,
                kink_margin: 1e-3,
            };
            let g = finite_diff_gradients(&p, &data, &fd, &oracle_solve_options()).unwrap();
            (g.da - &exact).norm()
        };
        let (e1, e2, e3) = (err(1e-4), err(5e-5), err(2.5e-5));
        for ratio in [e1 / e2, e2 / e3] {
            assert!((3.0..5.0).contains(&ratio), "errors {e1:e} {e2:e} {e3:e}");
        }
    }

    #[test]
    fn dense_with_zero_a_matches_matrix_free_exactly() {
        let (mut p, data) = instance(5);
        p.a.fill(0.0);
        let dense = dense_lemma2_gradients(&p, &data, &oracle_solve_options()).unwrap();
        let fast = implicit(&p, &data);
        let phi = feature_map(&data.x, &p.w).unwrap();
        let r = predict(&phi, &p.b).unwrap() - &data.y;
        let mask = phi.map(relu_prime);
        let expect = data.x.tr_mul(&mask.component_mul(&mask).component_mul(&(&r * p.b.transpose())));
        assert_eq!(dense.dw, expect);
        assert_eq!(fast.dw, expect);
        assert!((dense.da - fast.da).norm() < 1e-12);
    }

    #[test]
    fn dense_with_zero_b_has_no_weight_gradient() {
        let (mut p, data) = instance(6);
        p.b.fill(0.0);
        let g = dense_lemma2_gradients(&p, &data, &oracle_solve_options()).unwrap();
        assert_eq!(g.dw, DMatrix::zeros(3, 5));
        assert_eq!(g.da, DMatrix::zeros(5, 5));
    }

    #[test]
    fn dense_matches_matrix_free() {
        for seed in 0..10 {
            let (p, data) = random_instance(seed, 3, 2, 4, 0.5, 1e-4).unwrap();
            let e = BlockErrors::between(&dense_lemma2_gradients(&p, &data, &oracle_solve_options()).unwrap(), &implicit(&p, &data));
            assert!(e.max() < 1e-9, "seed {seed}: {e:?}");
        }
    }

    #[test]
    fn dense_refuses_large_systems() {
        let (p, _) = random_instance(0, 4, 3, 70, 0.5, 0.0).unwrap();
        let data = Dataset::new(DMatrix::from_element(60, 3, 0.1), DVector::zeros(60)).unwrap();
        assert!(matches!(
            dense_lemma2_gradients(&p, &data, &oracle_solve_options()),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn single_step_unroll_ignores_a() {
        let (p, data) = instance(7);
        let g = unrolled_gradients(&p, &data, 1).unwrap();
        assert_eq!(g.da, DMatrix::zeros(5, 5));
        let phi = feature_map(&data.x, &p.w).unwrap();
        assert_eq!(g.db, phi.tr_mul(&(predict(&phi, &p.b).unwrap() - &data.y)));
    }

    #[test]
    fn unroll_converges_geometrically() {
        let (p, data) = instance(8);
        let exact = implicit(&p, &data);
        let e = |k| BlockErrors::between(&unrolled_gradients(&p, &data, k).unwrap(), &exact).max();
        let (e10, e20, e200) = (e(10), e(20), e(200));
        assert!(e20 < e10 * 0.5f64.powi(5), "{e10:e} {e20:e}");
        assert!(e200 <= 1e-8, "{e200:e}");
        assert!(e(300) < 1e-7);
    }

    #[test]
    fn random_instances_are_mask_stable_and_reproducible() {
        let (p, data) = instance(9);
        check_mask_stability(&p, &data, 1e-4, &oracle_solve_options()).unwrap();
        assert!((p.gamma * operator_norm(&p.a, NORM_TOL) - 0.5).abs() < 1e-9);
        assert_eq!(instance(9).0, p);
    }

    #[test]
    fn grad_check_reports_all_pairs() {
        let (p, data) = instance(10);
        let report = grad_check(&p, &data, &oracle_solve_options(), &FdOptions::default(), 300).unwrap();
        assert_eq!(report.pairs.len(), 6);
        for pair in &report.pairs {
            assert!(pair.errors.max() < 1e-5, "{pair:?}");
        }
        let coarse = SolveOptions::absolute(1e-1, 10_000);
        let report = grad_check(&p, &data, &coarse, &FdOptions::default(), 300).unwrap();
        assert!(report.pairs[0].errors.max() > 1e-5);
    }
}
