//! Command-line harness: `run`, `sweep` and `check` over JSON configs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    check_rate, claim_integral, default_window, perturbation_budget, rate_checks, rates_csv,
    theoretical_rates, PerturbationBudget, Quantity, RateCheck, Verdict, CASE_II_TAUS,
};
use crate::damping::{log_grid, CouplingRule, DampingSchedule, Family, GammaCase, Regime};
use crate::dynamics::{Flow, Perturbation, SystemState};
use crate::integrate::{
    format_float, integrate, IntegrateError, IntegratorConfig, Method, Sampling, Trajectory,
};
use crate::lyapunov::{
    attach_energy, identity_audit, monotonicity_audit, perturbed_energy, EnergyParams,
    IdentityReport,
};
use crate::problem::{builtin, KktPoint, ProblemDocument, SeparableProblem};

/// Seed for the random gradient probes, recorded in `audit.json`.
pub const VALIDATION_SEED: u64 = 0x5EED;
pub const MAX_SWEEP_CELLS: usize = 10_000;
const IDENTITY_GRID: usize = 256;
const GRADIENT_PROBES: usize = 8;
const GRADIENT_TOL: f64 = 1e-6;
const SADDLE_TOL: f64 = 1e-9;
const EQUALITY_TOL: f64 = 1e-11;

pub const EXIT_OK: i32 = 0;
pub const EXIT_AUDIT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_REGIME: i32 = 3;
pub const EXIT_INTEGRATION: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "pdflow",
    version,
    about = "Integrate and audit inertial primal-dual flows"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output directory (default: the config's `outputs`, then $PDFLOW_OUT, then ./pdflow_out)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Concurrent sweep cells (default: all cores)
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Multiply integrator tolerances by this factor
    #[arg(long, global = true)]
    pub tol_scale: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one configuration and write trajectory.csv, audit.json and rates.csv
    Run { config: PathBuf },
    /// Run a parameter grid and write sweep.csv
    Sweep { config: PathBuf },
    /// Classify the regime and report its certificates without integrating
    Check { config: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `"P1"` or `"P2"`.
    Builtin(String),
    /// Path to a problem document, relative to the config file.
    File(PathBuf),
    Inline(ProblemDocument),
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DampingSpec {
    PowerLaw { alpha: f64, r: f64, t0: f64 },
    LogPower { r: f64, t0: f64 },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingSpec {
    ReciprocalGamma { beta0: f64 },
    LinearInT { r0: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    #[default]
    None,
    /// `c (1 + t)^{−q}` in every component.
    Power { c: f64, q: f64 },
    /// Piecewise-linear scalar through the points, zero outside them.
    Table { times: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorBlock {
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub sampling: Sampling,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub x: Option<Vec<f64>>,
    pub y: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub vx: Option<Vec<f64>>,
    pub vy: Option<Vec<f64>>,
    pub vlambda: Option<Vec<f64>>,
}

fn yes() -> bool {
    true
}
fn default_rel_slack() -> f64 {
    1e-6
}

/// Which audits decide the exit code. Tail-integral verdicts are heuristic and
/// only reported unless enabled.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    #[serde(default = "yes")]
    pub identities: bool,
    #[serde(default = "yes")]
    pub monotonicity: bool,
    #[serde(default = "yes")]
    pub rates: bool,
    #[serde(default = "yes")]
    pub saddle: bool,
    #[serde(default)]
    pub tail_integrals: bool,
    #[serde(default = "default_rel_slack")]
    pub rel_slack: f64,
    /// Fit window; the latter half of the run in log time by default.
    #[serde(default)]
    pub rate_window: Option<(f64, f64)>,
}

impl Default for AuditSpec {
    fn default() -> Self {
        Self {
            identities: true,
            monotonicity: true,
            rates: true,
            saddle: true,
            tail_integrals: false,
            rel_slack: default_rel_slack(),
            rate_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub damping: DampingSpec,
    pub coupling: CouplingSpec,
    /// Energy exponent for reciprocal coupling; the largest admissible value
    /// when omitted.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub integrator: IntegratorBlock,
    /// Final time.
    pub horizon: f64,
    #[serde(default)]
    pub initial: Option<InitialSpec>,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
    #[serde(default)]
    pub audits: AuditSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    /// Parameter name to values; the cells are the Cartesian product.
    /// Names: alpha, r, t0, beta0, r0, beta, horizon.
    pub grid: BTreeMap<String, Vec<f64>>,
}

/// A failure with its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: format!("config error: {m}"),
        }
    }
    fn regime(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_REGIME,
            message: format!("invalid regime: {m}"),
        }
    }
    fn integration(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INTEGRATION,
            message: format!("integration failed: {m}"),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    read_json(path)
}

pub fn load_sweep_config(path: &Path) -> Result<SweepConfig, CliError> {
    read_json(path)
}

/// Everything a config resolves to before integration.
pub struct Setup {
    pub problem: SeparableProblem,
    pub kkt: KktPoint,
    pub schedule: DampingSchedule,
    pub coupling: CouplingRule,
    pub regime: Regime,
    pub perturbation: Option<Perturbation>,
    pub budget: Option<PerturbationBudget>,
    pub integrator: IntegratorConfig,
}

fn build_problem(
    spec: &ProblemSpec,
    base_dir: &Path,
) -> Result<(SeparableProblem, KktPoint), CliError> {
    match spec {
        ProblemSpec::Builtin(name) => builtin::by_name(name)
            .ok_or_else(|| CliError::config(format!("unknown built-in problem {name:?}"))),
        ProblemSpec::File(path) => {
            let doc: ProblemDocument = read_json(&base_dir.join(path))?;
            doc.build().map_err(CliError::config)
        }
        ProblemSpec::Inline(doc) => doc.build().map_err(CliError::config),
    }
}

fn build_perturbation(
    spec: &PerturbationSpec,
    n1: usize,
    n2: usize,
) -> Result<Option<Perturbation>, CliError> {
    match spec {
        PerturbationSpec::None => Ok(None),
        PerturbationSpec::Power { c, q } => {
            if !(c.is_finite() && q.is_finite()) {
                return Err(CliError::config("perturbation parameters must be finite"));
            }
            Ok(Some(Perturbation::power(n1, n2, *c, *q)))
        }
        PerturbationSpec::Table { times, values } => {
            if times.is_empty() || times.len() != values.len() {
                return Err(CliError::config(
                    "perturbation table needs matching, nonempty times and values",
                ));
            }
            if !times.windows(2).all(|w| w[0] < w[1])
                || !times.iter().chain(values).all(|v| v.is_finite())
            {
                return Err(CliError::config(
                    "perturbation table times must be finite and strictly increasing",
                ));
            }
            Ok(Some(Perturbation::table(
                n1,
                n2,
                times.clone(),
                values.clone(),
            )))
        }
    }
}

/// Resolves a config: problem, schedule, coupling, regime and forcing.
/// Invalid regimes and divergent perturbation budgets are exit-3 errors.
pub fn setup(cfg: &RunConfig, base_dir: &Path, tol_scale: Option<f64>) -> Result<Setup, CliError> {
    let (problem, kkt) = build_problem(&cfg.problem, base_dir)?;
    let schedule = match cfg.damping {
        DampingSpec::PowerLaw { alpha, r, t0 } => DampingSchedule::power_law(alpha, r, t0),
        DampingSpec::LogPower { r, t0 } => DampingSchedule::log_power(r, t0),
    }
    .map_err(CliError::regime)?;
    let coupling = match cfg.coupling {
        CouplingSpec::ReciprocalGamma { beta0 } => CouplingRule::reciprocal(beta0),
        CouplingSpec::LinearInT { r0 } => CouplingRule::linear(r0),
    }
    .map_err(CliError::regime)?;
    let regime = crate::damping::validate_regime(&schedule, &coupling, cfg.beta);
    if let Regime::Invalid { reason } = &regime {
        return Err(CliError::regime(reason));
    }
    let perturbation = build_perturbation(&cfg.perturbation, problem.n1(), problem.n2())?;
    let budget = match &perturbation {
        Some(p) => Some(perturbation_budget(p, &schedule, &regime).map_err(CliError::regime)?),
        None => None,
    };
    let mut integrator = IntegratorConfig::new(cfg.horizon)
        .with_method(cfg.integrator.method)
        .with_sampling(cfg.integrator.sampling);
    if let Some(k) = tol_scale {
        if !(k.is_finite() && k > 0.0) {
            return Err(CliError::config(format!(
                "--tol-scale must be positive, got {k}"
            )));
        }
        integrator = integrator.scaled(k);
    }
    integrator
        .validate(schedule.t0())
        .map_err(CliError::config)?;
    Ok(Setup {
        problem,
        kkt,
        schedule,
        coupling,
        regime,
        perturbation,
        budget,
        integrator,
    })
}

fn initial_state(
    spec: Option<&InitialSpec>,
    t0: f64,
    p: &SeparableProblem,
) -> Result<SystemState, CliError> {
    let (n1, n2, m) = (p.n1(), p.n2(), p.m());
    let mut st = SystemState::zeros(t0, n1, n2, m);
    let Some(spec) = spec else {
        return Ok(st);
    };
    let fields: [(&str, &Option<Vec<f64>>, &mut Vec<f64>); 6] = [
        ("x", &spec.x, &mut st.x),
        ("y", &spec.y, &mut st.y),
        ("lambda", &spec.lambda, &mut st.lambda),
        ("vx", &spec.vx, &mut st.vx),
        ("vy", &spec.vy, &mut st.vy),
        ("vlambda", &spec.vlambda, &mut st.vlambda),
    ];
    for (name, src, dst) in fields {
        if let Some(v) = src {
            if v.len() != dst.len() {
                return Err(CliError::config(format!(
                    "initial.{name} has length {}, expected {}",
                    v.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(v);
        }
    }
    Ok(st)
}

/// Results of one run, ready to be written out.
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub audit: Value,
    pub rates: Vec<RateCheck>,
    pub pass: bool,
}

fn identity_json(rep: &IdentityReport) -> Value {
    json!({
        "coupling": rep.coupling,
        "cancellation": rep.cancellation,
        "sign_condition_worst": rep.sign_condition_worst,
        "sign_condition_holds": rep.sign_condition_holds,
        "degenerate_velocity_margin": rep.degenerate_velocity_margin,
        "grid_points": rep.grid_points,
    })
}

/// Integrates and audits. Integration failures return the partial trajectory
/// alongside the exit-4 error.
pub fn execute(cfg: &RunConfig, su: &Setup) -> Result<RunOutcome, (CliError, Option<Trajectory>)> {
    let t0 = su.schedule.t0();
    let init = initial_state(cfg.initial.as_ref(), t0, &su.problem).map_err(|e| (e, None))?;
    let flow = Flow::new(
        su.problem.clone(),
        su.schedule.clone(),
        su.coupling,
        su.perturbation.clone(),
    )
    .map_err(|e| (CliError::config(e), None))?;
    let mut traj = match integrate(&flow, &su.kkt, &init, &su.integrator) {
        Ok(t) => t,
        Err(IntegrateError::Config(m)) => return Err((CliError::config(m), None)),
        Err(IntegrateError::Dimension { expected, found }) => {
            return Err((
                CliError::config(format!("state dimension {found}, expected {expected}")),
                None,
            ))
        }
        Err(e) => return Err((CliError::integration(e), None)),
    };
    if !traj.is_completed() {
        let msg = format!("{:?}", traj.termination);
        return Err((CliError::integration(msg), Some(traj)));
    }
    let audit_err = |e: &dyn std::fmt::Display| CliError {
        code: EXIT_AUDIT,
        message: format!("audit error: {e}"),
    };
    let ep = EnergyParams::from_regime(&su.regime).expect("validated regime");
    let sched = &su.schedule;
    attach_energy(&ep, &su.kkt, sched, &mut traj).map_err(|e| (audit_err(&e), None))?;
    let t_end = su.integrator.t_end;
    let t1 = su.regime.t1(t0);
    let a = &cfg.audits;
    let mut pass = true;

    let grid = log_grid(t0, t_end, IDENTITY_GRID);
    let ident = identity_audit(&ep, sched, &su.coupling, &grid, t1)
        .map_err(|e| (audit_err(&e), Some(traj.clone())))?;
    let ident_ok = ident.equalities_within(EQUALITY_TOL)
        && ident.sign_condition_holds
        && ident.eta_margin_holds;
    if a.identities {
        pass &= ident_ok;
    }

    let energies: Vec<f64> = match &su.perturbation {
        Some(p) => perturbed_energy(&ep, &traj, Some(p), &su.kkt, sched)
            .map_err(|e| (audit_err(&e), Some(traj.clone())))?,
        None => traj
            .samples
            .iter()
            .map(|s| s.energy.unwrap_or(f64::NAN))
            .collect(),
    };
    let from = traj.samples.partition_point(|s| s.state.t < t1);
    let mono = monotonicity_audit(&energies[from..], a.rel_slack);
    let first_violation = mono.first_violation.map(|k| traj.samples[from + k].state.t);
    if a.monotonicity {
        pass &= mono.monotone;
    }

    let saddle_worst = traj
        .samples
        .iter()
        .map(|s| 0.5 * s.diagnostics.feasibility * s.diagnostics.feasibility - s.diagnostics.gap)
        .fold(f64::NEG_INFINITY, f64::max);
    let saddle_ok = saddle_worst <= SADDLE_TOL;
    if a.saddle {
        pass &= saddle_ok;
    }

    let window = a.rate_window.unwrap_or_else(|| default_window(t0, t_end));
    let with_traj =
        |e: crate::analysis::AnalysisError, t: &Trajectory| (audit_err(&e), Some(t.clone()));
    let mut rates =
        rate_checks(&traj, &su.regime, sched, window).map_err(|e| with_traj(e, &traj))?;
    let th = theoretical_rates(&su.regime, sched).map_err(|e| with_traj(e, &traj))?;
    if let Regime::GeneralGamma {
        case: GammaCase::CaseII,
        ..
    } = su.regime
    {
        let k = match sched.family() {
            Family::PowerLaw { alpha, r } if *r == 1.0 => *alpha,
            _ => 1.0,
        };
        for tau in CASE_II_TAUS {
            let slack = crate::analysis::default_slack(Quantity::Speed, &su.regime, th.basis);
            let mut rc = check_rate(
                &traj,
                Quantity::Speed,
                window,
                th.basis,
                -k * tau,
                slack,
                sched,
            )
            .map_err(|e| with_traj(e, &traj))?;
            rc.label = format!("speed_tau_{tau}");
            rates.push(rc);
        }
    }
    if a.rates {
        pass &= rates.iter().all(|r| r.pass);
    }

    let mut integrals = Vec::new();
    for claim in &th.integral_weights {
        let ti = claim_integral(&traj, claim, sched).map_err(|e| with_traj(e, &traj))?;
        if a.tail_integrals {
            pass &= ti.verdict == Verdict::Bounded;
        }
        integrals.push(json!({
            "quantity": claim.quantity.name(),
            "weight": claim.weight.describe(),
            "total": ti.total,
            "last_decade": ti.last_decade,
            "verdict": ti.verdict,
            "heuristic": ti.heuristic,
        }));
    }

    let grad = su
        .problem
        .validate_gradients(VALIDATION_SEED, GRADIENT_PROBES, 1e-6);
    pass &= grad.passes(GRADIENT_TOL);

    let audit = json!({
        "seed": VALIDATION_SEED,
        "regime": su.regime,
        "termination": traj.termination,
        "steps": traj.stats,
        "identity_residuals": identity_json(&ident),
        "eta_lower_bound_margin": if ident.eta_lower_bound_margin.is_finite() { json!(ident.eta_lower_bound_margin) } else { Value::Null },
        "monotone": mono.monotone,
        "first_violation": first_violation,
        "energy": if su.perturbation.is_some() { "perturbed" } else { "unperturbed" },
        "saddle_inequality": { "worst_excess": saddle_worst, "holds": saddle_ok },
        "rates": rates,
        "tail_integrals": integrals,
        "perturbation_budget": su.budget,
        "gradient_check": grad,
        "pass": pass,
    });
    Ok(RunOutcome {
        trajectory: traj,
        audit,
        rates,
        pass,
    })
}

fn output_dir(cli_out: Option<&Path>, cfg: &RunConfig, base_dir: &Path) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.outputs {
        return base_dir.join(p);
    }
    match std::env::var_os("PDFLOW_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("pdflow_out"),
    }
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn report(e: &CliError) -> i32 {
    eprintln!("{}", e.message);
    e.code
}

pub fn cmd_run(path: &Path, out: Option<&Path>, tol_scale: Option<f64>) -> i32 {
    let cfg = match load_run_config(path) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let dir = base_dir(path);
    let su = match setup(&cfg, &dir, tol_scale) {
        Ok(s) => s,
        Err(e) => return report(&e),
    };
    let out_dir = output_dir(out, &cfg, &dir);
    match execute(&cfg, &su) {
        Ok(o) => {
            let audit = serde_json::to_string_pretty(&o.audit).expect("audit serializes") + "\n";
            let written = write_file(&out_dir, "trajectory.csv", &o.trajectory.to_csv())
                .and_then(|_| write_file(&out_dir, "audit.json", &audit))
                .and_then(|_| write_file(&out_dir, "rates.csv", &rates_csv(&o.rates)));
            if let Err(e) = written {
                return report(&e);
            }
            if o.pass {
                println!("pass: outputs in {}", out_dir.display());
                EXIT_OK
            } else {
                eprintln!("audit failed: see {}", out_dir.join("audit.json").display());
                EXIT_AUDIT
            }
        }
        Err((e, partial)) => {
            if let Some(t) = partial {
                let _ = write_file(&out_dir, "trajectory.csv", &t.to_csv());
            }
            report(&e)
        }
    }
}

pub fn cmd_check(path: &Path) -> i32 {
    let cfg = match load_run_config(path) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let su = match setup(&cfg, &base_dir(path), None) {
        Ok(s) => s,
        Err(e) => return report(&e),
    };
    let t0 = su.schedule.t0();
    let ep = EnergyParams::from_regime(&su.regime).expect("validated regime");
    let grid = log_grid(t0, su.integrator.t_end, IDENTITY_GRID);
    let ident = match identity_audit(&ep, &su.schedule, &su.coupling, &grid, su.regime.t1(t0)) {
        Ok(r) => r,
        Err(e) => {
            return report(&CliError {
                code: EXIT_AUDIT,
                message: e.to_string(),
            })
        }
    };
    let rates = theoretical_rates(&su.regime, &su.schedule).ok();
    let growth = match &su.regime {
        Regime::GeneralGamma { growth, .. } => json!(growth),
        _ => Value::Null,
    };
    let out = json!({
        "regime": su.regime,
        "t1": su.regime.t1(t0),
        "growth": growth,
        "identity_residuals": identity_json(&ident),
        "eta_lower_bound_margin": ident.eta_lower_bound_margin,
        "theoretical_rates": rates,
        "perturbation_budget": su.budget,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("report serializes")
    );
    if let Some(b) = &su.budget {
        if !b.finite {
            eprintln!(
                "invalid regime: perturbation budget diverges (last decade adds {})",
                format_float(b.last_decade)
            );
            return EXIT_REGIME;
        }
    }
    EXIT_OK
}

const GRID_KEYS: [&str; 7] = ["alpha", "r", "t0", "beta0", "r0", "beta", "horizon"];

fn apply_param(cfg: &mut RunConfig, key: &str, v: f64) -> Result<(), CliError> {
    let bad = || {
        CliError::config(format!(
            "grid parameter {key} does not apply to the base config"
        ))
    };
    match key {
        "alpha" => match &mut cfg.damping {
            DampingSpec::PowerLaw { alpha, .. } => *alpha = v,
            DampingSpec::LogPower { .. } => return Err(bad()),
        },
        "r" => match &mut cfg.damping {
            DampingSpec::PowerLaw { r, .. } | DampingSpec::LogPower { r, .. } => *r = v,
        },
        "t0" => match &mut cfg.damping {
            DampingSpec::PowerLaw { t0, .. } | DampingSpec::LogPower { t0, .. } => *t0 = v,
        },
        "beta0" => match &mut cfg.coupling {
            CouplingSpec::ReciprocalGamma { beta0 } => *beta0 = v,
            CouplingSpec::LinearInT { .. } => return Err(bad()),
        },
        "r0" => match &mut cfg.coupling {
            CouplingSpec::LinearInT { r0 } => *r0 = v,
            CouplingSpec::ReciprocalGamma { .. } => return Err(bad()),
        },
        "beta" => cfg.beta = Some(v),
        "horizon" => cfg.horizon = v,
        _ => {
            return Err(CliError::config(format!(
                "unknown grid parameter {key:?}; expected one of {GRID_KEYS:?}"
            )))
        }
    }
    Ok(())
}

/// Cartesian product of the grid, in key order with the last key fastest.
pub fn sweep_cells(grid: &BTreeMap<String, Vec<f64>>) -> Result<Vec<Vec<(String, f64)>>, CliError> {
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(CliError::config("empty sweep grid"));
    }
    let count = grid
        .values()
        .try_fold(1usize, |acc, v| acc.checked_mul(v.len()));
    match count {
        Some(n) if n <= MAX_SWEEP_CELLS => {}
        _ => {
            return Err(CliError::config(format!(
                "sweep grid exceeds {MAX_SWEEP_CELLS} cells"
            )))
        }
    }
    let mut cells: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    for (k, vals) in grid {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |&v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

struct CellResult {
    code: i32,
    regime: String,
    rates: Vec<RateCheck>,
    message: String,
}

fn run_cell(cfg: &RunConfig, dir: &Path, tol_scale: Option<f64>) -> CellResult {
    let fail = |e: CliError, regime: String| CellResult {
        code: e.code,
        regime,
        rates: Vec::new(),
        message: e.message,
    };
    let su = match setup(cfg, dir, tol_scale) {
        Ok(s) => s,
        Err(e) => return fail(e, "invalid".into()),
    };
    let name = su.regime.name().to_string();
    match execute(cfg, &su) {
        Ok(o) => CellResult {
            code: if o.pass { EXIT_OK } else { EXIT_AUDIT },
            regime: name,
            rates: o.rates,
            message: String::new(),
        },
        Err((e, _)) => fail(e, name),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(
    cells: &[Vec<(String, f64)>],
    results: &[(i32, String, Vec<RateCheck>, String)],
) -> String {
    let keys: Vec<&str> = cells
        .first()
        .map(|c| c.iter().map(|(k, _)| k.as_str()).collect())
        .unwrap_or_default();
    let mut out = String::from("cell");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push_str(",regime,exit_code,gap_fitted,gap_theoretical,feas_fitted,feas_theoretical,speed_fitted,speed_theoretical,pass,message\n");
    for (i, (cell, (code, regime, rates, msg))) in cells.iter().zip(results).enumerate() {
        let _ = write!(out, "{i}");
        for (_, v) in cell {
            let _ = write!(out, ",{}", format_float(*v));
        }
        let _ = write!(out, ",{regime},{code}");
        for q in [Quantity::Gap, Quantity::Feasibility, Quantity::Speed] {
            match rates.iter().find(|r| r.quantity == q) {
                Some(r) => {
                    let _ = write!(
                        out,
                        ",{},{}",
                        r.fitted.map(format_float).unwrap_or_default(),
                        format_float(r.theoretical)
                    );
                }
                None => out.push_str(",,"),
            }
        }
        let _ = writeln!(out, ",{},{}", *code == EXIT_OK, csv_field(msg));
    }
    out
}

pub fn cmd_sweep(
    path: &Path,
    out: Option<&Path>,
    jobs: Option<usize>,
    tol_scale: Option<f64>,
) -> i32 {
    let sc = match load_sweep_config(path) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let cells = match sweep_cells(&sc.grid) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let mut configs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut cfg = sc.base.clone();
        for (k, v) in cell {
            if let Err(e) = apply_param(&mut cfg, k, *v) {
                return report(&e);
            }
        }
        configs.push(cfg);
    }
    let dir = base_dir(path);
    let threads = jobs.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => return report(&CliError::config(e)),
    };
    let results: Vec<CellResult> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| run_cell(c, &dir, tol_scale))
            .collect()
    });
    let rows: Vec<(i32, String, Vec<RateCheck>, String)> = results
        .into_iter()
        .map(|r| (r.code, r.regime, r.rates, r.message))
        .collect();
    let out_dir = output_dir(out, &sc.base, &dir);
    if let Err(e) = write_file(&out_dir, "sweep.csv", &sweep_csv(&cells, &rows)) {
        return report(&e);
    }
    let worst = rows.iter().map(|r| r.0).max().unwrap_or(EXIT_OK);
    let passed = rows.iter().filter(|r| r.0 == EXIT_OK).count();
    println!(
        "{passed}/{} cells passed: {}",
        rows.len(),
        out_dir.join("sweep.csv").display()
    );
    worst
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Run { config } => cmd_run(config, out, cli.tol_scale),
        Command::Sweep { config } => cmd_sweep(config, out, cli.jobs, cli.tol_scale),
        Command::Check { config } => cmd_check(config),
    }
}
