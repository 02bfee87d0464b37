//! Initializations and the sufficient conditions for linear convergence.
//!
//! [`check_conditions`] evaluates both the gradient-flow and gradient-descent inequalities
//! from the constants `lambda1 = ||W(0)|| + C1`, `lambda2 = ||A(0)|| + C2`,
//! `lambda3 = ||b(0)|| + C3`, `gamma0 = gamma * lambda2` and `alpha0 = sigma_min(Z(0))`.
//! Because ReLU is positively homogeneous, scaling a nonnegative-`A` initialization by
//! `beta` grows the left-hand sides faster than the right-hand sides, which is what
//! [`scale_to_satisfy`] exploits.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_forward, SolveOptions};
use crate::error::{Error, Result};
use crate::model::{feature_map, predict, Dataset, Params};
use crate::scalar::{lit, relu, to_f64, Real};
use crate::spectral::{min_eigenvalue, operator_norm, smallest_singular_value, NORM_TOL};

/// Target contraction modulus used when deriving `gamma`.
pub const DEFAULT_GAMMA0: f64 = 0.5;
/// Largest `beta` tried by [`scale_to_satisfy`].
pub const BETA_CAP: f64 = 1_099_511_627_776.0;
const DEGENERATE_SIGMA: f64 = 1e-12;
const JACKKNIFE_GROUPS: usize = 20;

/// Positive slack constants in the norm caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slack<T: Real> {
    pub c1: T,
    pub c2: T,
    pub c3: T,
}

impl<T: Real> Default for Slack<T> {
    fn default() -> Self {
        Self::uniform(T::one())
    }
}

impl<T: Real> Slack<T> {
    pub fn uniform(c: T) -> Self {
        Self { c1: c, c2: c, c3: c }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 > T::zero() && self.c2 > T::zero() && self.c3 > T::zero() {
            Ok(())
        } else {
            Err(Error::InvalidOptions("C1, C2, C3 must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport<T: Real> {
    pub alpha0: T,
    pub lambda1: T,
    pub lambda2: T,
    pub lambda3: T,
    pub lambda0: T,
    pub gamma0: T,
    #[serde(rename = "C1")]
    pub c1: T,
    #[serde(rename = "C2")]
    pub c2: T,
    #[serde(rename = "C3")]
    pub c3: T,
    pub gf_conditions: [bool; 2],
    pub gd_conditions: [bool; 3],
    /// Strict upper bound on the step size.
    pub eta_max: T,
    pub lambda_bar: T,
    /// `||y_hat(0) - y||`.
    pub initial_residual_norm: T,
}

impl<T: Real> InitReport<T> {
    pub fn gd_pass(&self) -> bool {
        self.gd_conditions.iter().all(|&c| c)
    }

    pub fn gf_pass(&self) -> bool {
        self.gf_conditions.iter().all(|&c| c)
    }

    /// `L(0) = ||y_hat(0) - y||^2 / 2`.
    pub fn initial_loss(&self) -> T {
        self.initial_residual_norm * self.initial_residual_norm * lit(0.5)
    }

    /// Per-step contraction factor `1 - eta alpha0^2 / 4` of the descent envelope.
    pub fn rate(&self, eta: T) -> T {
        T::one() - eta * self.alpha0 * self.alpha0 / lit(4.0)
    }
}

fn gaussian_matrix<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        lit(z * std)
    })
}

/// `W(0)` with i.i.d. `N(0, 1/m)` entries.
fn lecun_w<T: Real>(d: usize, m: usize, seed: u64) -> DMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_matrix(&mut rng, d, m, 1.0 / (m as f64).sqrt())
}

/// `gamma` such that `gamma * (||A|| + c2) = gamma0`.
pub fn gamma_for<T: Real>(a: &DMatrix<T>, c2: T, gamma0: T) -> T {
    gamma0 / (operator_norm(a, lit(NORM_TOL)) + c2)
}

/// Deterministic nonnegative initialization with `C2 = 1` and `gamma0 = 1/2`.
pub fn deterministic_init<T: Real>(x: &DMatrix<T>, m: usize, beta: T, seed: u64) -> Result<Params<T>> {
    deterministic_init_with(x, m, beta, seed, lit(DEFAULT_GAMMA0), T::one())
}

/// `W = beta W0`, `A = beta ||W0|| I`, `b = 0`, with `W0 ~ N(0, 1/m)` and `gamma` chosen so
/// that `gamma (||A|| + c2) = gamma0`. The same seed gives parameters exactly
/// proportional to `beta`.
pub fn deterministic_init_with<T: Real>(
    x: &DMatrix<T>,
    m: usize,
    beta: T,
    seed: u64,
    gamma0: T,
    c2: T,
) -> Result<Params<T>> {
    let n = x.nrows();
    if m < n {
        return Err(Error::WidthTooSmall { m, n });
    }
    if !(beta > T::zero()) || !beta.is_finite() {
        return Err(Error::InvalidParams("beta must be positive and finite".into()));
    }
    if !(gamma0 > T::zero() && gamma0 < T::one()) {
        return Err(Error::GammaTooLarge { gamma0: to_f64(gamma0) });
    }
    let w0 = lecun_w::<T>(x.ncols(), m, seed);
    let w_norm = operator_norm(&w0, lit(NORM_TOL));
    let a_diag = beta * w_norm;
    let gamma = gamma0 / (a_diag + c2);
    Params::new(
        w0 * beta,
        DMatrix::from_diagonal_element(m, m, a_diag),
        DVector::zeros(m),
        gamma,
    )
}

/// `W ~ N(0, 1/m)`, `A = I`, `b = 0`, with `gamma` supplied directly.
pub fn identity_init<T: Real>(d: usize, m: usize, gamma: T, seed: u64) -> Result<Params<T>> {
    if m == 0 {
        return Err(Error::InvalidParams("width must be at least 1".into()));
    }
    Params::new(lecun_w(d, m, seed), DMatrix::identity(m, m), DVector::zeros(m), gamma)
}

/// `W ~ N(0, 1)`, `A ~ |N(0, 1)|`, `b ~ N(0, 1/m)`, with `gamma ||A|| = 1/2`.
pub fn random_init<T: Real>(d: usize, m: usize, seed: u64) -> Result<Params<T>> {
    if m == 0 {
        return Err(Error::InvalidParams("width must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian_matrix(&mut rng, d, m, 1.0);
    let a = gaussian_matrix::<T>(&mut rng, m, m, 1.0).map(|v| v.abs());
    let b = DVector::from_fn(m, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        lit(z / (m as f64).sqrt())
    });
    let gamma = lit::<T>(DEFAULT_GAMMA0) / operator_norm(&a, lit(NORM_TOL));
    Params::new(w, a, b, gamma)
}

/// Evaluates the gradient-flow and gradient-descent conditions at `params`.
///
/// `alpha0` is zero when `N > m`, since `Z(0)` then has rank below `N`.
pub fn check_conditions<T: Real>(
    params: &Params<T>,
    data: &Dataset<T>,
    slack: &Slack<T>,
    opts: &SolveOptions<T>,
) -> Result<InitReport<T>> {
    slack.validate()?;
    let tol: T = lit(NORM_TOL);
    let lambda1 = operator_norm(&params.w, tol) + slack.c1;
    let lambda2 = operator_norm(&params.a, tol) + slack.c2;
    let lambda3 = params.b.norm() + slack.c3;
    let gamma0 = params.gamma * lambda2;
    if gamma0 >= T::one() {
        return Err(Error::GammaTooLarge { gamma0: to_f64(gamma0) });
    }

    let phi = feature_map(&data.x, &params.w)?;
    let state = solve_forward(params, &phi, opts)?.into_converged()?;
    let alpha0 = if data.n() > params.m() {
        T::zero()
    } else {
        smallest_singular_value(&state.z)?
    };
    let residual = (predict(&state.z, &params.b)? - &data.y).norm();
    let x_norm = data.x.norm();

    let one = T::one();
    let q = one - gamma0;
    let ratio = lambda1 / lambda2;
    let k = one + gamma0 * gamma0 / (q * q) * ratio * ratio;
    let lambda0 = (lambda1 / slack.c3)
        .max(gamma0 * lambda1 * lambda3 / (q * slack.c2 * lambda2))
        .max(lambda3 / slack.c1);

    let a2 = alpha0 * alpha0;
    let a3 = a2 * alpha0;
    let first = lambda0 * x_norm * residual / q;
    let second = k * lambda3 / (q * q) * x_norm * x_norm * residual;
    let third = k * lambda3 * lambda3 / (q * q) * x_norm * x_norm;
    let gf_conditions = [a2 >= first * lit(4.0), a3 >= second * lit(8.0)];
    let gd_conditions = [a2 >= first * lit(8.0), a3 >= second * lit(16.0), a2 >= third * lit(16.0)];

    let inner = k / (lambda1 * lambda1) + one / (lambda3 * lambda3);
    let lambda_bar = k / (inner * inner);
    let l1_2 = lambda1 * lambda1;
    let curvature = lit::<T>(2.0) * q * q * lambda_bar / (l1_2 * l1_2 * lambda3 * lambda3 * x_norm * x_norm);
    let eta_max = if alpha0 > T::zero() {
        (lit::<T>(4.0) / a2).min(curvature)
    } else {
        curvature
    };

    Ok(InitReport {
        alpha0,
        lambda1,
        lambda2,
        lambda3,
        lambda0,
        gamma0,
        c1: slack.c1,
        c2: slack.c2,
        c3: slack.c3,
        gf_conditions,
        gd_conditions,
        eta_max,
        lambda_bar,
        initial_residual_norm: residual,
    })
}

#[derive(Debug, Clone)]
pub struct ScaledInit<T: Real> {
    pub beta: T,
    pub params: Params<T>,
    pub report: InitReport<T>,
}

/// Doubles `beta` from 1 until the gradient-descent conditions hold for `beta * params`,
/// re-deriving `gamma` so that `gamma0` stays at its value for the unscaled point.
pub fn scale_to_satisfy<T: Real>(
    params: &Params<T>,
    data: &Dataset<T>,
    slack: &Slack<T>,
    opts: &SolveOptions<T>,
) -> Result<ScaledInit<T>> {
    slack.validate()?;
    let (n, m) = (data.n(), params.m());
    if m < n {
        return Err(Error::WidthTooSmall { m, n });
    }
    let phi = feature_map(&data.x, &params.w)?;
    let sigma = smallest_singular_value(&phi)?;
    if to_f64(sigma) <= DEGENERATE_SIGMA {
        return Err(Error::DegenerateFeatures { sigma_min: to_f64(sigma) });
    }
    let a_norm = operator_norm(&params.a, lit(NORM_TOL));
    let gamma0 = params.gamma * (a_norm + slack.c2);

    let mut beta = T::one();
    let cap: T = lit(BETA_CAP);
    while beta <= cap {
        let mut scaled = params.scaled(beta);
        scaled.gamma = gamma0 / (a_norm * beta + slack.c2);
        let report = check_conditions(&scaled, data, slack, opts)?;
        if report.gd_pass() {
            return Ok(ScaledInit {
                beta,
                params: scaled,
                report,
            });
        }
        beta *= lit(2.0);
    }
    Err(Error::BetaCapExceeded { cap: BETA_CAP })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaStarEstimate<T: Real> {
    pub value: T,
    pub samples: usize,
    pub standard_error: T,
}

/// Monte-Carlo estimate of `lambda_min(E[relu(X w) relu(X w)^T])`, `w ~ N(0, I_d)`, with a
/// delete-a-group jackknife standard error.
///
/// Samples are split into fixed groups, each drawn from its own stream of the seed, so the
/// result does not depend on the thread count.
pub fn estimate_lambda_star<T: Real + Send + Sync>(
    x: &DMatrix<T>,
    samples: usize,
    seed: u64,
) -> Result<LambdaStarEstimate<T>> {
    if samples == 0 {
        return Err(Error::InvalidOptions("samples must be at least 1".into()));
    }
    let (n, d) = x.shape();
    let groups = JACKKNIFE_GROUPS.min(samples);
    let sizes: Vec<usize> = (0..groups)
        .map(|g| samples / groups + usize::from(g < samples % groups))
        .collect();

    let sums: Vec<DMatrix<T>> = sizes
        .par_iter()
        .enumerate()
        .map(|(g, &count)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(g as u64);
            let mut acc = DMatrix::<T>::zeros(n, n);
            let mut w = DVector::<T>::zeros(d);
            for _ in 0..count {
                for v in w.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = lit(z);
                }
                let f = (x * &w).map(relu);
                acc.ger(T::one(), &f, &f, T::one());
            }
            acc
        })
        .collect();

    let total = sums.iter().fold(DMatrix::<T>::zeros(n, n), |acc, s| acc + s);
    let value = min_eigenvalue(&(&total / lit::<T>(samples as f64))).max(T::zero());
    let standard_error = if groups < 2 {
        T::zero()
    } else {
        let leave_out: Vec<T> = sums
            .iter()
            .zip(&sizes)
            .map(|(s, &c)| min_eigenvalue(&((&total - s) / lit::<T>((samples - c) as f64))))
            .collect();
        let g: T = lit(groups as f64);
        let mean = leave_out.iter().fold(T::zero(), |a, &v| a + v) / g;
        let ss = leave_out.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
        (ss * (g - T::one()) / g).sqrt()
    };
    Ok(LambdaStarEstimate {
        value,
        samples,
        standard_error,
    })
}
