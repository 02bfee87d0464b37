//! Backward pass through the equilibrium by the implicit function theorem.
//!
//! With `Q = I - gamma D (A^T kron I_N)` the loss gradients all share the adjoint vector
//! `Q^{-T} vec(r b^T)`, `r = y_hat - y`. Its `N x m` reshape `V` solves
//! `V = r b^T + gamma (D o V) A^T`, a contraction with the same modulus as the forward map,
//! so it is found by Picard iteration without ever forming `Q`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::equilibrium::{ensure_contractive, solve_forward_from, EquilibriumState, SolveOptions};
use crate::error::{shape, Error, Result};
use crate::model::{feature_map, loss, predict, Dataset, Params};
use crate::scalar::{to_f64, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real> {
    pub dw: DMatrix<T>,
    pub da: DMatrix<T>,
    pub db: DVector<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &Params<T>) -> Self {
        Self {
            dw: DMatrix::zeros(params.d(), params.m()),
            da: DMatrix::zeros(params.m(), params.m()),
            db: DVector::zeros(params.m()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dw.iter().chain(self.da.iter()).chain(self.db.iter()).all(|v| v.is_finite())
    }

    /// Frobenius norm of the whole gradient.
    pub fn norm(&self) -> T {
        (self.dw.norm_squared() + self.da.norm_squared() + self.db.norm_squared()).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState<T: Real> {
    pub v: DMatrix<T>,
    pub iterations: usize,
    pub residual: T,
    pub converged: bool,
    pub residual_trace: Vec<T>,
}

/// Solves `Q^T vec(V) = vec(r b^T)` with the masks frozen at `state`.
pub fn solve_adjoint<T: Real>(
    state: &EquilibriumState<T>,
    params: &Params<T>,
    r: &DVector<T>,
    opts: &SolveOptions<T>,
) -> Result<AdjointState<T>> {
    opts.validate()?;
    let (n, m) = state.z.shape();
    if r.len() != n || params.m() != m {
        return Err(shape("solve_adjoint", format!("r of length {n}, width {m}"), format!("{}, {}", r.len(), params.m())));
    }
    if opts.check_contraction {
        ensure_contractive(params)?;
    }
    let rhs = r * params.b.transpose();
    let tol = opts.effective_tol(rhs.norm());
    let a_t = params.a.transpose();

    let mut v = DMatrix::<T>::zeros(n, m);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut residual = T::zero();
    for _ in 0..opts.max_iter {
        let next = &rhs + state.d_mask.component_mul(&v) * &a_t * params.gamma;
        residual = (&next - &v).norm();
        trace.push(residual);
        v = next;
        if residual <= tol {
            converged = true;
            break;
        }
        if !residual.is_finite() {
            break;
        }
    }
    Ok(AdjointState {
        v,
        iterations: trace.len(),
        residual,
        converged,
        residual_trace: trace,
    })
}

/// `db = Z^T r`, `dA = gamma Z^T (D o V)`, `dW = X^T (E o D o V)`.
pub fn gradients<T: Real>(
    state: &EquilibriumState<T>,
    adj: &AdjointState<T>,
    params: &Params<T>,
    x: &DMatrix<T>,
    r: &DVector<T>,
) -> Result<Gradients<T>> {
    if !adj.converged {
        return Err(Error::UnconvergedAdjoint {
            iterations: adj.iterations,
            residual: to_f64(adj.residual),
        });
    }
    gradients_unchecked(state, adj, params, x, r)
}

/// [`gradients`] without the convergence requirement on the adjoint.
pub fn gradients_unchecked<T: Real>(
    state: &EquilibriumState<T>,
    adj: &AdjointState<T>,
    params: &Params<T>,
    x: &DMatrix<T>,
    r: &DVector<T>,
) -> Result<Gradients<T>> {
    let (n, m) = state.z.shape();
    if adj.v.shape() != (n, m) || r.len() != n || x.nrows() != n || x.ncols() != params.d() || params.m() != m {
        return Err(shape("gradients", format!("N={n}, m={m}, d={}", params.d()), "mismatched inputs"));
    }
    let dv = state.d_mask.component_mul(&adj.v);
    Ok(Gradients {
        db: state.z.tr_mul(r),
        da: state.z.tr_mul(&dv) * params.gamma,
        dw: x.tr_mul(&state.e_mask.component_mul(&dv)),
    })
}

/// Forward and adjoint solver settings for one loss-and-gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions<T: Real> {
    pub forward: SolveOptions<T>,
    pub adjoint: SolveOptions<T>,
    /// Fail on an unconverged forward or adjoint solve instead of flagging it.
    pub require_converged: bool,
}

impl<T: Real> EvalOptions<T> {
    pub fn strict() -> Self {
        Self::uniform(SolveOptions::strict())
    }

    pub fn uniform(opts: SolveOptions<T>) -> Self {
        Self {
            forward: opts,
            adjoint: opts,
            require_converged: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Telemetry {
    pub forward_iters: usize,
    pub adjoint_iters: usize,
    pub forward_converged: bool,
    pub adjoint_converged: bool,
    pub forward_residual: f64,
    pub adjoint_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation<T: Real> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub state: EquilibriumState<T>,
    pub prediction: DVector<T>,
    /// `y_hat - y`.
    pub residual: DVector<T>,
    pub telemetry: Telemetry,
}

/// Loss at the equilibrium, without gradients.
pub fn forward_loss<T: Real>(
    params: &Params<T>,
    data: &Dataset<T>,
    opts: &SolveOptions<T>,
    warm_start: Option<&DMatrix<T>>,
) -> Result<(T, EquilibriumState<T>)> {
    let phi = feature_map(&data.x, &params.w)?;
    let state = solve_forward_from(params, &phi, opts, warm_start)?;
    let yhat = predict(&state.z, &params.b)?;
    Ok((loss(&yhat, &data.y)?, state))
}

/// Feature map, forward solve, prediction, loss, adjoint solve and gradients, with one set
/// of solver options shared by both solves.
pub fn loss_and_gradients<T: Real>(
    params: &Params<T>,
    data: &Dataset<T>,
    opts: &SolveOptions<T>,
) -> Result<Evaluation<T>> {
    loss_and_gradients_with(params, data, &EvalOptions::uniform(*opts), None)
}

pub fn loss_and_gradients_with<T: Real>(
    params: &Params<T>,
    data: &Dataset<T>,
    opts: &EvalOptions<T>,
    warm_start: Option<&DMatrix<T>>,
) -> Result<Evaluation<T>> {
    if data.d() != params.d() {
        return Err(shape("loss_and_gradients", format!("d = {}", params.d()), format!("{}", data.d())));
    }
    let phi = feature_map(&data.x, &params.w)?;
    let mut state = solve_forward_from(params, &phi, &opts.forward, warm_start)?;
    if opts.require_converged {
        state = state.into_converged()?;
    }
    let prediction = predict(&state.z, &params.b)?;
    let residual = &prediction - &data.y;
    let loss_value = loss(&prediction, &data.y)?;

    // The forward solve already certified the contraction when asked to.
    let adjoint_opts = opts.adjoint.with_contraction_check(opts.adjoint.check_contraction && !opts.forward.check_contraction);
    let adj = solve_adjoint(&state, params, &residual, &adjoint_opts)?;
    let grads = if opts.require_converged {
        gradients(&state, &adj, params, &data.x, &residual)?
    } else {
        gradients_unchecked(&state, &adj, params, &data.x, &residual)?
    };
    let telemetry = Telemetry {
        forward_iters: state.iterations,
        adjoint_iters: adj.iterations,
        forward_converged: state.converged,
        adjoint_converged: adj.converged,
        forward_residual: to_f64(state.residual),
        adjoint_residual: to_f64(adj.residual),
    };
    Ok(Evaluation {
        loss: loss_value,
        grads,
        state,
        prediction,
        residual,
        telemetry,
    })
}
