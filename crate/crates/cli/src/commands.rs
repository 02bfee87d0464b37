use std::fmt::Write as _;

use implicit_eq::init::check_conditions;
use implicit_eq::trainer::{self, Halt, Mode, SweepAxis, SweepBase, TrainHeader, AVERAGING_NOTE};
use implicit_eq::verify::{grad_check, random_instance, BlockErrors, OraclePair};
use implicit_eq::{Dataset, FdOptions, InitReport, Params, SolveOptions, TrainConfig};
use serde::Serialize;

use crate::config::{build_data, build_params, solver_for, EtaRule, EtaSpec, GradCheckSpec, InitSpec, RunConfig, TrainSpec};
use crate::output::{write_atomic, write_json};
use crate::{CliError, Settings};

/// Fraction of the certified bound used by `"eta": "eta_max"`; the bound itself is rejected.
pub const ETA_MAX_FRACTION: f64 = 0.99;
/// Divisor applied to the certified bound by `"eta": "flow"`.
pub const FLOW_DIVISOR: f64 = 100.0;

pub fn check_init(cfg: &RunConfig, _settings: &Settings) -> Result<u8, CliError> {
    let (train, _) = build_data(cfg.require_data()?, cfg.seed)?;
    let (params, beta) = build_params(cfg.require_init()?, &train, cfg.seed, &cfg.conditions)?;
    let report = check_conditions(&params, &train, &cfg.conditions.slack(), &SolveOptions::strict())?;
    #[derive(Serialize)]
    struct Out<'a> {
        beta: f64,
        gd_pass: bool,
        gf_pass: bool,
        #[serde(flatten)]
        report: &'a InitReport,
    }
    let out = Out {
        beta,
        gd_pass: report.gd_pass(),
        gf_pass: report.gf_pass(),
        report: &report,
    };
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| CliError::Output(e.to_string()))?);
    Ok(if report.gd_pass() { 0 } else { 1 })
}

fn train_config(spec: &TrainSpec, mode: Mode, eta: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        eta,
        epochs: spec.epochs,
        forward_opts: solver_for(spec.forward, mode),
        adjoint_opts: solver_for(spec.adjoint, mode),
        monitor_spectral: spec.monitor_spectral.unwrap_or(mode == Mode::Strict),
        monitor_every: spec.monitor_every,
        seed,
        mode,
        warm_start: spec.warm_start,
    }
}

fn resolve_eta(eta: EtaSpec, n: usize, report: Option<&InitReport>) -> Result<f64, CliError> {
    let bound = || {
        report
            .map(|r| r.eta_max)
            .ok_or_else(|| CliError::Config("train.eta: a certified rule needs a condition report".into()))
    };
    match eta {
        EtaSpec::Value(v) => Ok(v),
        EtaSpec::Named(EtaRule::InverseN) => Ok(1.0 / n as f64),
        EtaSpec::Named(EtaRule::EtaMax) => Ok(ETA_MAX_FRACTION * bound()?),
        EtaSpec::Named(EtaRule::Flow) => Ok(bound()? / FLOW_DIVISOR),
    }
}

#[derive(Serialize)]
struct TrainSidecar<'a> {
    run: &'a RunConfig,
    beta: f64,
    #[serde(flatten)]
    header: &'a TrainHeader<f64>,
    halt: Option<&'a Halt>,
    final_train_loss: Option<f64>,
    final_test_loss: Option<f64>,
}

pub fn train(cfg: &RunConfig, settings: &Settings) -> Result<u8, CliError> {
    let spec = cfg.require_train()?;
    let mode = settings.mode.unwrap_or(spec.mode);
    let (train, test) = build_data(cfg.require_data()?, cfg.seed)?;
    let (params, beta) = build_params(cfg.require_init()?, &train, cfg.seed, &cfg.conditions)?;
    let needs_report = mode == Mode::Strict || matches!(spec.eta, EtaSpec::Named(EtaRule::EtaMax | EtaRule::Flow));
    let report = if needs_report {
        Some(check_conditions(&params, &train, &cfg.conditions.slack(), &SolveOptions::strict())?)
    } else {
        None
    };
    let eta = resolve_eta(spec.eta, train.n(), report.as_ref())?;
    let config = train_config(spec, mode, eta, cfg.seed);
    let outcome = trainer::train(&params, &train, &config, test.as_ref(), report.as_ref())?;

    let dir = &settings.out;
    let mut csv = Vec::new();
    outcome.log.write_csv(&mut csv).map_err(|e| CliError::Output(e.to_string()))?;
    write_atomic(&dir.join("train_log.csv"), &csv)?;
    let last = outcome.log.rows.last();
    let sidecar = TrainSidecar {
        run: cfg,
        beta,
        header: &outcome.log.header,
        halt: outcome.halt.as_ref(),
        final_train_loss: last.map(|r| r.train_loss),
        final_test_loss: last.and_then(|r| r.test_loss),
    };
    write_json(&dir.join("train_log.json"), &sidecar)?;
    write_json(&dir.join("params_final.json"), &outcome.params)?;

    if let Some(r) = &report {
        let violations = trainer::verify_theorem2(&outcome.log, r);
        if r.gd_pass() && !violations.is_empty() {
            eprintln!("warning: {} logged quantities left their certified bounds", violations.len());
        }
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6e}"));
    println!(
        "epochs {} eta {eta:.6e} train_loss {} test_loss {} avg_forward_iters {:.2}",
        outcome.log.rows.len().saturating_sub(1),
        fmt(sidecar.final_train_loss),
        fmt(sidecar.final_test_loss),
        outcome.log.avg_forward_iters()
    );
    match &outcome.halt {
        Some(h) => {
            eprintln!("halted at epoch {}: {:?}", h.epoch, h.reason);
            Ok(4)
        }
        None => Ok(0),
    }
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "axis",
    "value",
    "status",
    "avg_forward_iters",
    "final_train_loss",
    "final_test_loss",
    "max_gammaA_opnorm",
    "halted",
    "error",
];

pub fn sweep(cfg: &RunConfig, settings: &Settings) -> Result<u8, CliError> {
    let spec = cfg.require_train()?;
    let s = cfg.sweep.as_ref().ok_or_else(|| CliError::Config("sweep: missing section".into()))?;
    let axis = if !s.gamma.is_empty() {
        SweepAxis::Gamma(s.gamma.clone())
    } else if !s.width.is_empty() {
        SweepAxis::Width(s.width.clone())
    } else {
        SweepAxis::Eta(s.eta.clone())
    };
    let (width, gamma) = match cfg.require_init()? {
        InitSpec::Identity { width, gamma } => (*width, *gamma),
        _ => return Err(CliError::Config("init.kind: sweeps use the identity initialization".into())),
    };
    let mode = settings.mode.unwrap_or(spec.mode);
    let (train, test) = build_data(cfg.require_data()?, cfg.seed)?;
    let eta = match (&axis, spec.eta) {
        (SweepAxis::Eta(v), _) => v[0],
        (_, EtaSpec::Named(EtaRule::EtaMax | EtaRule::Flow)) => {
            return Err(CliError::Config("train.eta: sweeps take a number or \"inverse_n\"".into()))
        }
        (_, e) => resolve_eta(e, train.n(), None)?,
    };
    let base = SweepBase {
        data: &train,
        test: test.as_ref(),
        width,
        gamma,
        config: train_config(spec, mode, eta, cfg.seed),
        init_seed: cfg.seed,
    };
    let cells = trainer::run_sweep(&axis, &base, settings.parallel)?;

    let name = axis.name();
    let mut summary = SUMMARY_COLUMNS.join(",");
    summary.push('\n');
    let mut failures = 0;
    for (i, cell) in cells.iter().enumerate() {
        match &cell.result {
            Ok(outcome) => {
                let mut csv = Vec::new();
                outcome.log.write_csv(&mut csv).map_err(|e| CliError::Output(e.to_string()))?;
                write_atomic(&settings.out.join(format!("{name}_{i:02}.csv")), &csv)?;
                let c = cell.summary().expect("ok cell");
                let test = c.final_test_loss.map(|v| v.to_string()).unwrap_or_default();
                let status = if c.halted { "halted" } else { "ok" };
                writeln!(
                    summary,
                    "{name},{},{status},{},{},{test},{},{},",
                    c.value, c.avg_forward_iters, c.final_train_loss, c.max_gamma_a_opnorm, c.halted
                )
                .expect("string write");
                println!(
                    "{name} {} {status} avg_forward_iters {:.2} final_train_loss {:.6e}",
                    c.value, c.avg_forward_iters, c.final_train_loss
                );
            }
            Err(e) => {
                failures += 1;
                let clean = e.replace([',', '\n'], ";");
                writeln!(summary, "{name},{},failed,,,,,,{clean}", cell.value).expect("string write");
                println!("{name} {} failed: {e}", cell.value);
            }
        }
    }
    write_atomic(&settings.out.join("summary.csv"), summary.as_bytes())?;
    write_json(
        &settings.out.join("summary.json"),
        &serde_json::json!({ "run": cfg, "axis": name, "averaging": AVERAGING_NOTE }),
    )?;
    Ok(if !cells.is_empty() && failures == cells.len() { 4 } else { 0 })
}

#[derive(Serialize)]
struct BlockNorms {
    w: f64,
    a: f64,
    b: f64,
}

#[derive(Serialize)]
struct GradCheckOut<'a> {
    spec: &'a GradCheckSpec,
    seed: u64,
    tolerance: f64,
    pass: bool,
    implicit_norms: BlockNorms,
    pairs: &'a [OraclePair],
    worst: f64,
}

pub fn grad_check_cmd(cfg: &RunConfig, _settings: &Settings) -> Result<u8, CliError> {
    let g = cfg.grad_check.unwrap_or_default();
    let (mut params, data): (Params, Dataset) = random_instance(cfg.seed, g.n, g.d, g.m, g.gamma0, g.kink_margin)?;
    if g.zero_b {
        params.b.fill(0.0);
    }
    let adjoint = SolveOptions {
        tol: g.adjoint_tol,
        max_iter: 100_000,
        relative: true,
        check_contraction: true,
    };
    let fd = FdOptions {
        step: g.fd_step,
        kink_margin: g.kink_margin,
    };
    let check = grad_check(&params, &data, &adjoint, &fd, g.unroll_steps)?;
    let worst = check.pairs.iter().map(|p| p.errors.max()).fold(0.0, f64::max);
    let pass = worst < g.tolerance;
    let out = GradCheckOut {
        spec: &g,
        seed: cfg.seed,
        tolerance: g.tolerance,
        pass,
        implicit_norms: BlockNorms {
            w: check.implicit.dw.norm(),
            a: check.implicit.da.norm(),
            b: check.implicit.db.norm(),
        },
        pairs: &check.pairs,
        worst,
    };
    for p in &check.pairs {
        let BlockErrors { w, a, b } = p.errors;
        println!("{:>11} vs {:<11} W {w:.3e} A {a:.3e} b {b:.3e}", p.reference, p.oracle);
    }
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| CliError::Output(e.to_string()))?);
    Ok(if pass { 0 } else { 1 })
}
