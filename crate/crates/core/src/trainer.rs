//! Full-batch gradient descent with per-epoch monitors.
//!
//! Row `k` of a [`TrainLog`] describes `theta(k)`, the parameters after `k` updates; a run
//! of `epochs` steps therefore logs `epochs + 1` rows, the last one forward-only.

use std::fmt;
use std::io::{self, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::SolveOptions;
use crate::error::{Error, Result};
use crate::implicit_grad::{forward_loss, loss_and_gradients_with, EvalOptions};
use crate::init::{identity_init, InitReport};
use crate::model::{Dataset, Params};
use crate::scalar::{lit, to_f64, Real};
use crate::spectral::{operator_norm, smallest_singular_value, NORM_TOL};

/// Column names of the CSV log, in order.
pub const CSV_COLUMNS: [&str; 9] = [
    "epoch",
    "train_loss",
    "test_loss",
    "A_opnorm",
    "gammaA_opnorm",
    "sigma_min_Z",
    "forward_iters",
    "adjoint_iters",
    "rate_envelope",
];

/// How the averaged forward-iteration count is formed.
pub const AVERAGING_NOTE: &str = "avg_forward_iters is the mean of forward_iters over every logged row of the run";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Halt on loss of contraction, reject uncertified step sizes, require converged solves.
    Strict,
    /// Continue past violations and unconverged solves, flagging them in the log.
    Experiment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<T: Real> {
    pub eta: T,
    pub epochs: usize,
    pub forward_opts: SolveOptions<T>,
    pub adjoint_opts: SolveOptions<T>,
    pub monitor_spectral: bool,
    pub monitor_every: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Start each forward solve from the previous epoch's equilibrium.
    pub warm_start: bool,
}

impl<T: Real> TrainConfig<T> {
    /// Strict solver tolerances, every-epoch spectral monitoring.
    pub fn strict(eta: T, epochs: usize) -> Self {
        Self {
            eta,
            epochs,
            forward_opts: SolveOptions::strict(),
            adjoint_opts: SolveOptions::strict(),
            monitor_spectral: true,
            monitor_every: 1,
            seed: 0,
            mode: Mode::Strict,
            warm_start: false,
        }
    }

    /// Absolute `1e-2` tolerance capped at 100 iterations, no spectral monitoring.
    pub fn experiment(eta: T, epochs: usize) -> Self {
        Self {
            eta,
            epochs,
            forward_opts: SolveOptions::experiment(),
            adjoint_opts: SolveOptions::experiment(),
            monitor_spectral: false,
            monitor_every: 1,
            seed: 0,
            mode: Mode::Experiment,
            warm_start: false,
        }
    }

    /// `eta = 0` is accepted and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= T::zero()) || !self.eta.is_finite() {
            return Err(Error::InvalidOptions("eta must be finite and nonnegative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidOptions("epochs must be at least 1".into()));
        }
        if self.monitor_every == 0 {
            return Err(Error::InvalidOptions("monitor_every must be at least 1".into()));
        }
        self.forward_opts.validate()?;
        self.adjoint_opts.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow<T: Real> {
    pub epoch: usize,
    pub train_loss: T,
    pub test_loss: Option<T>,
    pub a_opnorm: T,
    pub gamma_a_opnorm: T,
    pub sigma_min_z: Option<T>,
    pub forward_iters: usize,
    /// Zero on the final, forward-only row.
    pub adjoint_iters: usize,
    /// `(1 - eta alpha0^2 / 4)^k L(0)`, when `alpha0` is known.
    pub rate_envelope: Option<T>,
    /// `exp(-alpha0^2 k eta / 2) L(0)`, the continuous-time envelope at `t = k eta`.
    pub flow_envelope: Option<T>,
    pub w_opnorm: T,
    pub b_norm: T,
    pub forward_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHeader<T: Real> {
    pub config: TrainConfig<T>,
    pub init_report: Option<InitReport<T>>,
    /// The `alpha0` the envelopes were computed from.
    pub alpha0: Option<T>,
    pub averaging: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog<T: Real> {
    pub header: TrainHeader<T>,
    pub rows: Vec<TrainRow<T>>,
}

fn opt_field<T: Real>(v: Option<T>) -> String {
    v.map(|x| to_f64(x).to_string()).unwrap_or_default()
}

impl<T: Real> TrainLog<T> {
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "{}", CSV_COLUMNS.join(","))?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                to_f64(r.train_loss),
                opt_field(r.test_loss),
                to_f64(r.a_opnorm),
                to_f64(r.gamma_a_opnorm),
                opt_field(r.sigma_min_z),
                r.forward_iters,
                r.adjoint_iters,
                opt_field(r.rate_envelope),
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn avg_forward_iters(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.forward_iters as f64).sum::<f64>() / self.rows.len() as f64
    }

    pub fn max_gamma_a_opnorm(&self) -> Option<T> {
        self.rows.iter().map(|r| r.gamma_a_opnorm).reduce(|a, b| a.max(b))
    }

    /// True if some epoch's loss exceeds its predecessor's.
    pub fn has_loss_increase(&self) -> bool {
        self.rows.windows(2).any(|w| w[1].train_loss > w[0].train_loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum HaltReason {
    /// `gamma ||A(k)|| >= 1` in strict mode.
    NonContractive { gamma_norm: f64 },
    /// Loss or gradients stopped being finite.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Halt {
    pub epoch: usize,
    pub reason: HaltReason,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    /// Parameters at the last logged epoch.
    pub params: Params<T>,
    pub log: TrainLog<T>,
    /// Set when training stopped before `epochs` updates; the log holds the rows reached.
    pub halt: Option<Halt>,
}

fn envelope<T: Real>(factor_arg: T, k: usize, l0: T) -> T {
    // (1 - x)^k via log1p for accuracy when x is tiny.
    let kt: T = lit(k as f64);
    if factor_arg < T::one() {
        (kt * (-factor_arg).ln_1p()).exp() * l0
    } else {
        (T::one() - factor_arg).powi(k as i32) * l0
    }
}

fn descend<T: Real>(params: &mut Params<T>, grads: &crate::implicit_grad::Gradients<T>, eta: T) {
    params.w -= &grads.dw * eta;
    params.a -= &grads.da * eta;
    params.b -= &grads.db * eta;
}

/// Runs `config.epochs` gradient-descent steps from `params`.
///
/// In strict mode a supplied `report` certifies the step size; training stops with a
/// [`Halt`] the first epoch `gamma ||A(k)|| >= 1`.
pub fn train<T: Real>(
    params: &Params<T>,
    data: &Dataset<T>,
    config: &TrainConfig<T>,
    test: Option<&Dataset<T>>,
    report: Option<&InitReport<T>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    params.validate()?;
    let strict = config.mode == Mode::Strict;
    if let (true, Some(r)) = (strict, report) {
        if config.eta >= r.eta_max {
            return Err(Error::StepSizeRejected {
                eta: to_f64(config.eta),
                eta_max: to_f64(r.eta_max),
            });
        }
    }
    let norm_tol: T = lit(NORM_TOL);
    let entry_norm = params.gamma * operator_norm(&params.a, norm_tol);
    if entry_norm >= T::one() {
        return Err(Error::NonContractive {
            gamma_norm: to_f64(entry_norm),
        });
    }

    // Contraction is certified once per epoch below, not again inside each solve.
    let eval = EvalOptions {
        forward: config.forward_opts.with_contraction_check(false),
        adjoint: config.adjoint_opts.with_contraction_check(false),
        require_converged: strict,
    };
    let fits = data.n() <= params.m();
    let mut alpha0 = report.map(|r| r.alpha0);
    let mut l0 = None;
    let mut theta = params.clone();
    let mut warm: Option<DMatrix<T>> = None;
    let mut rows = Vec::with_capacity(config.epochs + 1);
    let mut halt = None;

    for k in 0..=config.epochs {
        let a_opnorm = operator_norm(&theta.a, norm_tol);
        let gamma_a_opnorm = theta.gamma * a_opnorm;
        if strict && gamma_a_opnorm >= T::one() {
            halt = Some(Halt {
                epoch: k,
                reason: HaltReason::NonContractive {
                    gamma_norm: to_f64(gamma_a_opnorm),
                },
            });
            break;
        }

        let warm_ref = if config.warm_start { warm.as_ref() } else { None };
        let (train_loss, state, grads, adjoint_iters) = if k < config.epochs {
            let ev = loss_and_gradients_with(&theta, data, &eval, warm_ref)?;
            let iters = ev.telemetry.adjoint_iters;
            (ev.loss, ev.state, Some(ev.grads), iters)
        } else {
            let (loss, state) = forward_loss(&theta, data, &eval.forward, warm_ref)?;
            if strict {
                state.clone().into_converged()?;
            }
            (loss, state, None, 0)
        };
        let finite = train_loss.is_finite() && grads.as_ref().is_none_or(|g| g.is_finite());
        if !finite {
            halt = Some(Halt {
                epoch: k,
                reason: HaltReason::Diverged,
            });
            break;
        }

        let monitored = k % config.monitor_every == 0;
        let sigma_min_z = if fits && ((config.monitor_spectral && monitored) || (k == 0 && alpha0.is_none())) {
            Some(smallest_singular_value(&state.z)?)
        } else {
            None
        };
        if k == 0 {
            l0 = Some(train_loss);
            if alpha0.is_none() {
                alpha0 = sigma_min_z;
            }
        }
        let sigma_min_z = sigma_min_z.filter(|_| config.monitor_spectral && monitored);
        let test_loss = match test {
            Some(t) => Some(forward_loss(&theta, t, &eval.forward, None)?.0),
            None => None,
        };
        let start = l0.unwrap_or(train_loss);
        let kt: T = lit(k as f64);
        let (rate_envelope, flow_envelope) = match alpha0 {
            Some(a) => {
                let a2 = a * a;
                (
                    Some(envelope(config.eta * a2 / lit(4.0), k, start)),
                    Some((-(a2 * kt * config.eta) / lit(2.0)).exp() * start),
                )
            }
            None => (None, None),
        };

        rows.push(TrainRow {
            epoch: k,
            train_loss,
            test_loss,
            a_opnorm,
            gamma_a_opnorm,
            sigma_min_z,
            forward_iters: state.iterations,
            adjoint_iters,
            rate_envelope,
            flow_envelope,
            w_opnorm: operator_norm(&theta.w, norm_tol),
            b_norm: theta.b.norm(),
            forward_converged: state.converged,
        });

        if let Some(g) = grads {
            descend(&mut theta, &g, config.eta);
        }
        if config.warm_start {
            warm = Some(state.z);
        }
    }

    Ok(TrainOutcome {
        params: theta,
        log: TrainLog {
            header: TrainHeader {
                config: *config,
                init_report: report.cloned(),
                alpha0,
                averaging: AVERAGING_NOTE.to_string(),
            },
            rows,
        },
        halt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    WNorm,
    ANorm,
    BNorm,
    SigmaMin,
    Envelope,
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quantity::WNorm => "||W(k)|| <= lambda1",
            Quantity::ANorm => "||A(k)|| <= lambda2",
            Quantity::BNorm => "||b(k)|| <= lambda3",
            Quantity::SigmaMin => "sigma_min(Z(k)) >= alpha0/2",
            Quantity::Envelope => "L(k) <= (1 - eta alpha0^2/4)^k L(0)",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub epoch: usize,
    pub quantity: Quantity,
    pub observed: f64,
    pub bound: f64,
}

/// Relative slack on the loss envelope, absorbing roundoff in the logged losses.
const ENVELOPE_SLACK: f64 = 1e-12;

/// Re-checks the norm caps, the singular-value floor and the loss envelope at every row.
///
/// The envelope is recomputed from `report.alpha0`, the log's step size and its first loss.
pub fn verify_theorem2<T: Real>(log: &TrainLog<T>, report: &InitReport<T>) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(first) = log.rows.first() else {
        return out;
    };
    let l0 = first.train_loss;
    let eta = log.header.config.eta;
    let x = eta * report.alpha0 * report.alpha0 / lit(4.0);
    let half_alpha = report.alpha0 / lit(2.0);
    let slack: T = lit(1.0 + ENVELOPE_SLACK);
    for r in &log.rows {
        let mut check = |quantity, observed: T, bound: T, ok: bool| {
            if !ok {
                out.push(Violation {
                    epoch: r.epoch,
                    quantity,
                    observed: to_f64(observed),
                    bound: to_f64(bound),
                });
            }
        };
        check(Quantity::WNorm, r.w_opnorm, report.lambda1, r.w_opnorm <= report.lambda1);
        check(Quantity::ANorm, r.a_opnorm, report.lambda2, r.a_opnorm <= report.lambda2);
        check(Quantity::BNorm, r.b_norm, report.lambda3, r.b_norm <= report.lambda3);
        if let Some(s) = r.sigma_min_z {
            check(Quantity::SigmaMin, s, half_alpha, s >= half_alpha);
        }
        let bound = envelope(x, r.epoch, l0);
        check(Quantity::Envelope, r.train_loss, bound, r.train_loss <= bound * slack);
    }
    out
}

/// One axis of a one-dimensional sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis<T: Real> {
    Gamma(Vec<T>),
    Width(Vec<usize>),
    Eta(Vec<T>),
}

impl<T: Real> SweepAxis<T> {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Gamma(_) => "gamma",
            SweepAxis::Width(_) => "width",
            SweepAxis::Eta(_) => "eta",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            SweepAxis::Gamma(v) | SweepAxis::Eta(v) => v.iter().map(|&x| to_f64(x)).collect(),
            SweepAxis::Width(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Gamma(v) | SweepAxis::Eta(v) => v.len(),
            SweepAxis::Width(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub value: f64,
    pub avg_forward_iters: f64,
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
    pub max_gamma_a_opnorm: f64,
    pub halted: bool,
}

impl CellSummary {
    pub fn from_outcome<T: Real>(value: f64, outcome: &TrainOutcome<T>) -> Self {
        let last = outcome.log.rows.last();
        Self {
            value,
            avg_forward_iters: outcome.log.avg_forward_iters(),
            final_train_loss: last.map_or(f64::NAN, |r| to_f64(r.train_loss)),
            final_test_loss: last.and_then(|r| r.test_loss).map(to_f64),
            max_gamma_a_opnorm: outcome.log.max_gamma_a_opnorm().map_or(f64::NAN, to_f64),
            halted: outcome.halt.is_some(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell<T: Real> {
    pub value: f64,
    pub result: std::result::Result<TrainOutcome<T>, String>,
}

impl<T: Real> SweepCell<T> {
    pub fn summary(&self) -> Option<CellSummary> {
        self.result.as_ref().ok().map(|o| CellSummary::from_outcome(self.value, o))
    }
}

/// Everything a sweep cell is built from besides the swept value.
#[derive(Debug, Clone)]
pub struct SweepBase<'a, T: Real> {
    pub data: &'a Dataset<T>,
    pub test: Option<&'a Dataset<T>>,
    pub width: usize,
    pub gamma: T,
    pub config: TrainConfig<T>,
    /// Seed of the identity-`A` initialization, shared by every cell.
    pub init_seed: u64,
}

/// Trains one identity-`A` cell per swept value. Cells run on `threads` workers (1 for
/// sequential); results stay in declared order and a failing cell does not stop the rest.
pub fn run_sweep<T: Real + Send + Sync>(
    axis: &SweepAxis<T>,
    base: &SweepBase<'_, T>,
    threads: usize,
) -> Result<Vec<SweepCell<T>>> {
    let values = axis.values();
    let cell = |i: usize| -> SweepCell<T> {
        let (width, gamma, mut config) = (base.width, base.gamma, base.config);
        let (width, gamma) = match axis {
            SweepAxis::Gamma(v) => (width, v[i]),
            SweepAxis::Width(v) => (v[i], gamma),
            SweepAxis::Eta(v) => {
                config.eta = v[i];
                (width, gamma)
            }
        };
        let result = identity_init(base.data.d(), width, gamma, base.init_seed)
            .and_then(|p| train(&p, base.data, &config, base.test, None))
            .map_err(|e| e.to_string());
        SweepCell {
            value: values[i],
            result,
        }
    };
    let threads = threads.max(1);
    if threads == 1 {
        return Ok((0..values.len()).map(cell).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidOptions(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..values.len()).into_par_iter().map(cell).collect()))
}

/// Per-gamma averaged forward iterations and final losses in experiment mode.
pub fn gamma_sweep<T: Real + Send + Sync>(
    data: &Dataset<T>,
    test: Option<&Dataset<T>>,
    width: usize,
    gammas: &[T],
    base: &TrainConfig<T>,
    init_seed: u64,
) -> Result<Vec<SweepCell<T>>> {
    let config = TrainConfig {
        forward_opts: SolveOptions::experiment(),
        adjoint_opts: SolveOptions::experiment(),
        mode: Mode::Experiment,
        ..*base
    };
    let base = SweepBase {
        data,
        test,
        width,
        gamma: gammas.first().copied().unwrap_or_else(|| lit(0.5)),
        config,
        init_seed,
    };
    run_sweep(&SweepAxis::Gamma(gammas.to_vec()), &base, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, LabelMode};
    use crate::implicit_grad::loss_and_gradients;
    use crate::init::{check_conditions, deterministic_init, scale_to_satisfy, Slack};
    use crate::model::{feature_map, predict};
    use crate::equilibrium::solve_forward;

    fn desk(n: usize, d: usize, seed: u64) -> Dataset<f64> {
        synthetic(n, d, seed, LabelMode::Signs).unwrap()
    }

    fn certified(n: usize, d: usize, m: usize, seed: u64) -> (Dataset<f64>, Params<f64>, InitReport<f64>) {
        let data = desk(n, d, seed);
        let p = deterministic_init(&data.x, m, 1.0, seed).unwrap();
        let s = scale_to_satisfy(&p, &data, &Slack::default(), &SolveOptions::strict()).unwrap();
        (data, s.params, s.report)
    }

    #[test]
    fn zero_step_freezes_everything() {
        let data = desk(6, 3, 1);
        let p = identity_init(3, 8, 0.3, 2).unwrap();
        let mut p = p;
        p.b.fill(0.2);
        let out = train(&p, &data, &TrainConfig::strict(0.0, 5), None, None).unwrap();
        assert_eq!(out.params, p);
        let first = out.log.rows[0].train_loss;
        assert!(out.log.rows.iter().all(|r| r.train_loss == first));
        assert_eq!(out.log.rows.len(), 6);
        assert_eq!(out.log.rows[5].adjoint_iters, 0);
    }

    #[test]
    fn zero_residual_stays_zero() {
        let mut data = desk(5, 3, 3);
        let mut p = identity_init(3, 7, 0.4, 3).unwrap();
        p.b.fill(0.3);
        let phi = feature_map(&data.x, &p.w).unwrap();
        let z = solve_forward(&p, &phi, &SolveOptions::absolute(1e-15, 10_000)).unwrap().z;
        data.y = predict(&z, &p.b).unwrap();
        let out = train(&p, &data, &TrainConfig::strict(0.1, 4), None, None).unwrap();
        // Strict forward tolerance bounds the residual near 1e-10, hence the loss near 1e-20.
        for r in &out.log.rows {
            assert!(r.train_loss < 1e-18, "{}", r.train_loss);
        }
        assert!((&out.params.w - &p.w).norm() < 1e-9);
    }

    #[test]
    fn one_epoch_is_one_gradient_step() {
        let data = desk(6, 3, 4);
        let mut p = identity_init(3, 8, 0.3, 4).unwrap();
        p.b.fill(0.1);
        let eta = 0.05;
        let out = train(&p, &data, &TrainConfig::strict(eta, 1), None, None).unwrap();
        let ev = loss_and_gradients(&p, &data, &SolveOptions::strict()).unwrap();
        assert_eq!(out.params.w, &p.w - &ev.grads.dw * eta);
        assert_eq!(out.params.a, &p.a - &ev.grads.da * eta);
        assert_eq!(out.params.b, &p.b - &ev.grads.db * eta);
        assert_eq!(out.params.gamma, p.gamma);

        let halves = train(&p, &data, &TrainConfig::strict(eta / 2.0, 2), None, None).unwrap();
        assert!((&halves.params.a - &out.params.a).norm() > 0.0 || (&halves.params.b - &out.params.b).norm() > 0.0);
    }

    #[test]
    fn logged_norms_are_self_consistent() {
        let data = desk(6, 3, 5);
        let mut p = identity_init(3, 8, 0.3, 5).unwrap();
        p.b.fill(0.1);
        let cfg = TrainConfig::strict(0.05, 3);
        let mut theta = p.clone();
        let out = train(&p, &data, &cfg, None, None).unwrap();
        for r in &out.log.rows {
            let expect = operator_norm(&theta.a, NORM_TOL);
            assert_eq!(r.a_opnorm, expect);
            assert_eq!(r.gamma_a_opnorm, theta.gamma * expect);
            if r.epoch < cfg.epochs {
                let ev = loss_and_gradients(&theta, &data, &SolveOptions::strict()).unwrap();
                descend(&mut theta, &ev.grads, cfg.eta);
            }
        }
    }

    #[test]
    fn certified_run_meets_the_monitor_suite() {
        let (data, p, report) = certified(12, 5, 24, 7);
        assert!(report.gd_pass());
        let eta = 0.99 * report.eta_max;
        let out = train(&p, &data, &TrainConfig::strict(eta, 60), None, Some(&report)).unwrap();
        assert!(out.halt.is_none());
        assert_eq!(verify_theorem2(&out.log, &report), vec![]);
        assert!(!out.log.has_loss_increase());
        assert_eq!(out.log.header.alpha0, Some(report.alpha0));
        assert_eq!(out.log.rows[0].rate_envelope, Some(out.log.rows[0].train_loss));
    }

    #[test]
    fn oversized_step_is_rejected_in_strict_mode() {
        let (data, p, report) = certified(8, 4, 16, 8);
        let err = train(&p, &data, &TrainConfig::strict(2.0 * report.eta_max, 5), None, Some(&report)).unwrap_err();
        assert!(matches!(err, Error::StepSizeRejected { .. }));
    }

    #[test]
    fn certified_bound_is_loose_but_overshooting_breaks_the_envelope() {
        let (data, p, report) = certified(8, 4, 16, 9);
        let mut cfg = TrainConfig::experiment(10.0 * report.eta_max, 40);
        cfg.forward_opts = SolveOptions::strict().with_contraction_check(false);
        cfg.adjoint_opts = cfg.forward_opts;
        // After beta-scaling the certified bound is many orders below the stability limit.
        let out = train(&p, &data, &cfg, None, Some(&report)).unwrap();
        assert!(verify_theorem2(&out.log, &report).is_empty());

        // Past 2 / sigma_max(Z)^2 the step overshoots along the top direction of b.
        let phi = feature_map(&data.x, &p.w).unwrap();
        let z = solve_forward(&p, &phi, &SolveOptions::strict()).unwrap().z;
        let top = crate::spectral::largest_singular_value(&z);
        cfg.eta = 8.0 / (top * top);
        let out = train(&p, &data, &cfg, None, Some(&report)).unwrap();
        assert!(out.log.has_loss_increase());
        let v = verify_theorem2(&out.log, &report);
        assert!(v.iter().any(|v| v.quantity == Quantity::Envelope));
    }

    #[test]
    fn hand_built_sigma_violation_is_reported_once() {
        let (data, p, report) = certified(6, 3, 12, 10);
        let mut out = train(&p, &data, &TrainConfig::strict(0.5 * report.eta_max, 4), None, Some(&report)).unwrap();
        assert!(verify_theorem2(&out.log, &report).is_empty());
        out.log.rows[2].sigma_min_z = Some(report.alpha0 / 2.0 * 0.9);
        let v = verify_theorem2(&out.log, &report);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].epoch, 2);
        assert_eq!(v[0].quantity, Quantity::SigmaMin);
    }

    #[test]
    fn strict_mode_halts_on_lost_contraction() {
        let data = desk(6, 3, 11);
        let mut p = identity_init(3, 8, 0.9, 11).unwrap();
        p.b.fill(1.0);
        p.a *= 1.2;
        assert!(matches!(
            train(&p, &data, &TrainConfig::strict(0.1, 3), None, None),
            Err(Error::NonContractive { .. })
        ));

        // A step large enough to push gamma ||A|| past 1 after the first update.
        let mut p = identity_init(3, 8, 0.9, 11).unwrap();
        p.b.fill(1.0);
        let out = train(&p, &data, &TrainConfig::strict(5.0, 10), None, None).unwrap();
        let halt = out.halt.expect("expected a halt");
        assert!(matches!(halt.reason, HaltReason::NonContractive { .. }));
        assert_eq!(out.log.rows.len(), halt.epoch);
    }

    #[test]
    fn csv_layout() {
        let data = desk(5, 3, 12);
        let test = desk(4, 3, 13);
        let mut p = identity_init(3, 6, 0.3, 12).unwrap();
        p.b.fill(0.1);
        let out = train(&p, &data, &TrainConfig::experiment(0.1, 3), None, None).unwrap();
        let csv = out.log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,test_loss,A_opnorm,gammaA_opnorm,sigma_min_Z,forward_iters,adjoint_iters,rate_envelope");
        assert_eq!(lines.len(), 5);
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 9);
            assert_eq!(fields[2], "");
            assert_eq!(fields[5], "");
        }
        let with_test = train(&p, &data, &TrainConfig::experiment(0.1, 3), Some(&test), None).unwrap();
        for line in with_test.log.to_csv().lines().skip(1) {
            assert!(!line.split(',').nth(2).unwrap().is_empty());
        }
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let (data, p, report) = certified(6, 3, 12, 14);
        let cfg = TrainConfig::strict(0.9 * report.eta_max, 10);
        let a = train(&p, &data, &cfg, None, Some(&report)).unwrap();
        let b = train(&p, &data, &cfg, None, Some(&report)).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn warm_start_changes_only_iteration_counts() {
        let data = desk(6, 3, 15);
        let mut p = identity_init(3, 8, 0.5, 15).unwrap();
        p.b.fill(0.1);
        let cold = train(&p, &data, &TrainConfig::strict(0.05, 5), None, None).unwrap();
        let mut cfg = TrainConfig::strict(0.05, 5);
        cfg.warm_start = true;
        let warm = train(&p, &data, &cfg, None, None).unwrap();
        for (c, w) in cold.log.rows.iter().zip(&warm.log.rows).skip(1) {
            assert!(w.forward_iters <= c.forward_iters);
            assert!((c.train_loss - w.train_loss).abs() < 1e-8 * c.train_loss.max(1.0));
        }
    }

    #[test]
    fn gamma_sweep_is_ordered_and_monotone() {
        let data = desk(20, 5, 16);
        let cells = gamma_sweep(&data, None, 30, &[0.1, 0.8], &TrainConfig::experiment(0.05, 5), 16).unwrap();
        assert_eq!(cells.len(), 2);
        let s: Vec<CellSummary> = cells.iter().map(|c| c.summary().unwrap()).collect();
        assert_eq!(s[0].value, 0.1);
        assert!(s[1].avg_forward_iters > s[0].avg_forward_iters);
        let single = gamma_sweep(&data, None, 30, &[0.3], &TrainConfig::experiment(0.05, 2), 16).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn parallel_sweep_matches_sequential() {
        let data = desk(10, 4, 17);
        let base = SweepBase {
            data: &data,
            test: None,
            width: 12,
            gamma: 0.3,
            config: TrainConfig::experiment(0.05, 3),
            init_seed: 17,
        };
        let axis = SweepAxis::Width(vec![10, 12, 16]);
        let seq = run_sweep(&axis, &base, 1).unwrap();
        let par = run_sweep(&axis, &base, 3).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.summary(), b.summary());
        }
    }

    #[test]
    fn failing_cell_does_not_abort_sweep() {
        let data = desk(10, 4, 18);
        let base = SweepBase {
            data: &data,
            test: None,
            width: 12,
            gamma: 0.3,
            config: TrainConfig::experiment(0.05, 2),
            init_seed: 18,
        };
        let cells = run_sweep(&SweepAxis::Gamma(vec![0.3, 1.5, 0.5]), &base, 1).unwrap();
        assert!(cells[0].result.is_ok());
        assert!(cells[1].result.is_err());
        assert!(cells[2].result.is_ok());
    }

    #[test]
    fn report_free_training_derives_alpha0() {
        let data = desk(5, 3, 19);
        let p = deterministic_init(&data.x, 10, 1.0, 19).unwrap();
        let r = check_conditions(&p, &data, &Slack::default(), &SolveOptions::strict()).unwrap();
        let mut cfg = TrainConfig::strict(0.01, 2);
        cfg.monitor_spectral = false;
        let out = train(&p, &data, &cfg, None, None).unwrap();
        let a = out.log.header.alpha0.unwrap();
        assert!((a - r.alpha0).abs() < 1e-8 * r.alpha0);
        assert!(out.log.rows.iter().all(|row| row.sigma_min_z.is_none()));
    }
}
