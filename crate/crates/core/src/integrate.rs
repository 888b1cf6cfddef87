//! Time integration: classical RK4 on a fixed step and Dormand–Prince 5(4)
//! with PI step control, sampled on a linear or logarithmic grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, Flow, SystemState};
use crate::linalg::{norm, sub};
use crate::problem::{Diagnostics, KktPoint, ProblemError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("initial state has {found} components, system expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("integration did not complete: {0:?}")]
    Incomplete(Termination),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// A first-order system `y' = F(t, y)` on a flat state vector.
pub trait OdeSystem: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), String>;
}

impl OdeSystem for Flow {
    fn dim(&self) -> usize {
        Flow::dim(self)
    }
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), String> {
        self.eval_flat(t, y, dy).map_err(|e| e.to_string())
    }
}

/// Closure-backed system that never fails.
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), String> {
        (self.f)(t, y, dy);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Rk4Fixed {
        h: f64,
    },
    AdaptiveRk45 {
        #[serde(default = "default_rel_tol")]
        rel_tol: f64,
        #[serde(default = "default_abs_tol")]
        abs_tol: f64,
        #[serde(default = "default_h_init")]
        h_init: f64,
        #[serde(default = "default_h_min")]
        h_min: f64,
        #[serde(default = "default_h_max")]
        h_max: f64,
    },
}

fn default_rel_tol() -> f64 {
    1e-8
}
fn default_abs_tol() -> f64 {
    1e-10
}
fn default_h_init() -> f64 {
    1e-3
}
fn default_h_min() -> f64 {
    1e-12
}
fn default_h_max() -> f64 {
    1.0
}

impl Default for Method {
    fn default() -> Self {
        Self::AdaptiveRk45 {
            rel_tol: default_rel_tol(),
            abs_tol: default_abs_tol(),
            h_init: default_h_init(),
            h_min: default_h_min(),
            h_max: default_h_max(),
        }
    }
}

impl Method {
    pub fn adaptive(rel_tol: f64, abs_tol: f64) -> Self {
        match Self::default() {
            Self::AdaptiveRk45 {
                h_init,
                h_min,
                h_max,
                ..
            } => Self::AdaptiveRk45 {
                rel_tol,
                abs_tol,
                h_init,
                h_min,
                h_max,
            },
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "spacing", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    Linear { n: usize },
    Logarithmic { n: usize },
}

impl Default for Sampling {
    fn default() -> Self {
        Self::Logarithmic { n: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub t_end: f64,
    pub sampling: Sampling,
}

impl IntegratorConfig {
    /// Default adaptive method and logarithmic sampling up to `t_end`.
    pub fn new(t_end: f64) -> Self {
        Self {
            method: Method::default(),
            t_end,
            sampling: Sampling::default(),
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    /// Tolerances multiplied by `k`; a fixed step is scaled by `k^{1/4}` so
    /// that its global error scales by roughly `k` as well.
    pub fn scaled(mut self, k: f64) -> Self {
        self.method = match self.method {
            Method::Rk4Fixed { h } => Method::Rk4Fixed {
                h: h * k.powf(0.25),
            },
            Method::AdaptiveRk45 {
                rel_tol,
                abs_tol,
                h_init,
                h_min,
                h_max,
            } => Method::AdaptiveRk45 {
                rel_tol: rel_tol * k,
                abs_tol: abs_tol * k,
                h_init: (h_init * k.min(1.0)).max(h_min),
                h_min,
                h_max,
            },
        };
        self
    }

    pub fn validate(&self, t0: f64) -> Result<(), IntegrateError> {
        let bad = |m: String| Err(IntegrateError::Config(m));
        if !(self.t_end.is_finite() && self.t_end > t0) {
            return bad(format!("t_end = {} must exceed t0 = {t0}", self.t_end));
        }
        match self.method {
            Method::Rk4Fixed { h } => {
                if !(h.is_finite() && h > 0.0) {
                    return bad(format!("step h = {h} must be positive"));
                }
            }
            Method::AdaptiveRk45 {
                rel_tol,
                abs_tol,
                h_init,
                h_min,
                h_max,
            } => {
                if !(rel_tol > 0.0 && abs_tol > 0.0) {
                    return bad("tolerances must be positive".into());
                }
                if !(h_min > 0.0 && h_min <= h_init && h_init <= h_max) {
                    return bad(format!(
                        "need 0 < h_min <= h_init <= h_max, got {h_min}, {h_init}, {h_max}"
                    ));
                }
            }
        }
        let n = match self.sampling {
            Sampling::Linear { n } | Sampling::Logarithmic { n } => n,
        };
        if n < 2 {
            return bad(format!("need at least 2 samples, got {n}"));
        }
        if matches!(self.sampling, Sampling::Logarithmic { .. }) && t0 <= 0.0 {
            return bad("logarithmic sampling needs t0 > 0".into());
        }
        Ok(())
    }
}

/// The sample grid: first point `t0`, last point exactly `t_end`. Linear grids
/// are `t0 + i·spacing`; logarithmic grids are `t0 (t_end/t0)^{i/(n−1)}`.
pub fn sample_times(t0: f64, cfg: &IntegratorConfig) -> Vec<f64> {
    let mut ts: Vec<f64> = match cfg.sampling {
        Sampling::Linear { n } => {
            let spacing = (cfg.t_end - t0) / (n - 1) as f64;
            (0..n).map(|i| t0 + i as f64 * spacing).collect()
        }
        Sampling::Logarithmic { n } => {
            let l = (cfg.t_end / t0).ln();
            (0..n)
                .map(|i| t0 * (l * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    };
    let last = ts.len() - 1;
    ts[0] = t0;
    ts[last] = cfg.t_end;
    ts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    StepUnderflow { t: f64 },
    NonFinite { t: f64, detail: String },
}

impl Termination {
    pub fn is_completed(&self) -> bool {
        matches!(self, Termination::Completed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepStats {
    pub accepted: u64,
    pub rejected: u64,
    pub evaluations: u64,
}

/// Raw output of [`integrate_system`].
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub termination: Termination,
    pub stats: StepStats,
}

/// Integrates `sys` from `(t0, y0)`, recording the state at every sample time.
/// Failures end the run and are recorded in `termination`; the samples reached
/// so far are kept.
pub fn integrate_system(
    sys: &dyn OdeSystem,
    t0: f64,
    y0: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Solution, IntegrateError> {
    cfg.validate(t0)?;
    if y0.len() != sys.dim() {
        return Err(IntegrateError::Dimension {
            expected: sys.dim(),
            found: y0.len(),
        });
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(IntegrateError::Config("initial state is not finite".into()));
    }
    let grid = sample_times(t0, cfg);
    let mut sol = Solution {
        times: vec![t0],
        states: vec![y0.to_vec()],
        termination: Termination::Completed,
        stats: StepStats::default(),
    };
    match cfg.method {
        Method::Rk4Fixed { h } => rk4(sys, t0, y0, h, &grid, &mut sol),
        Method::AdaptiveRk45 {
            rel_tol,
            abs_tol,
            h_init,
            h_min,
            h_max,
        } => dopri5(
            sys,
            t0,
            y0,
            Dopri {
                rel_tol,
                abs_tol,
                h_init,
                h_min,
                h_max,
            },
            &grid,
            &mut sol,
        ),
    }
    Ok(sol)
}

fn rk4(sys: &dyn OdeSystem, t0: f64, y0: &[f64], h: f64, grid: &[f64], sol: &mut Solution) {
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    );
    for &target in &grid[1..] {
        while t < target {
            let step = if t + h >= target { target - t } else { h };
            let result = (|| -> Result<(), String> {
                sys.eval(t, &y, &mut k1)?;
                axpy(&y, 0.5 * step, &k1, &mut tmp);
                sys.eval(t + 0.5 * step, &tmp, &mut k2)?;
                axpy(&y, 0.5 * step, &k2, &mut tmp);
                sys.eval(t + 0.5 * step, &tmp, &mut k3)?;
                axpy(&y, step, &k3, &mut tmp);
                sys.eval(t + step, &tmp, &mut k4)
            })();
            sol.stats.evaluations += 4;
            if let Err(detail) = result {
                sol.termination = Termination::NonFinite { t, detail };
                return;
            }
            for i in 0..n {
                y[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t = if step == target - t { target } else { t + step };
            sol.stats.accepted += 1;
            if y.iter().any(|v| !v.is_finite()) {
                sol.termination = Termination::NonFinite {
                    t,
                    detail: "state overflow".into(),
                };
                return;
            }
        }
        sol.times.push(target);
        sol.states.push(y.clone());
    }
}

#[inline]
fn axpy(y: &[f64], a: f64, k: &[f64], out: &mut [f64]) {
    for ((o, y), k) in out.iter_mut().zip(y).zip(k) {
        *o = y + a * k;
    }
}

struct Dopri {
    rel_tol: f64,
    abs_tol: f64,
    h_init: f64,
    h_min: f64,
    h_max: f64,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output (Hairer & Wanner, DOPRI5 continuous extension of order 4).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MAX: f64 = 5.0;
const FAC_MIN: f64 = 0.2;
const PI_BETA: f64 = 0.04;
const PI_EXPO: f64 = 0.2 - PI_BETA * 0.75;

fn dopri5(sys: &dyn OdeSystem, t0: f64, y0: &[f64], p: Dopri, grid: &[f64], sol: &mut Solution) {
    let n = y0.len();
    let t_end = *grid.last().expect("grid has at least two points");
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut cont: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let mut next_sample = 1;

    if let Err(detail) = sys.eval(t, &y, &mut k[0]) {
        sol.termination = Termination::NonFinite { t, detail };
        return;
    }
    sol.stats.evaluations += 1;
    let mut h = p.h_init;
    let mut err_old = 1e-4_f64;
    let mut last_rejected = false;

    while t < t_end {
        let cap = if t > 0.0 {
            p.h_max.min(0.1 * t)
        } else {
            p.h_max
        }
        .max(p.h_min);
        h = h.min(cap);
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        } else if h < p.h_min {
            sol.termination = Termination::StepUnderflow { t };
            return;
        }

        let stages = (|| -> Result<(), String> {
            let [k1, k2, k3, k4, k5, k6, k7] = &mut k;
            for i in 0..n {
                tmp[i] = y[i] + h * A21 * k1[i];
            }
            sys.eval(t + C2 * h, &tmp, k2)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            sys.eval(t + C3 * h, &tmp, k3)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            sys.eval(t + C4 * h, &tmp, k4)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            sys.eval(t + C5 * h, &tmp, k5)?;
            for i in 0..n {
                tmp[i] = y[i]
                    + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            sys.eval(t + h, &tmp, k6)?;
            for i in 0..n {
                y_new[i] = y[i]
                    + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            sys.eval(t + h, &y_new, k7)
        })();
        sol.stats.evaluations += 6;
        if let Err(detail) = stages {
            sol.termination = Termination::NonFinite { t, detail };
            return;
        }

        let mut acc = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k[0][i]
                    + E3 * k[2][i]
                    + E4 * k[3][i]
                    + E5 * k[4][i]
                    + E6 * k[5][i]
                    + E7 * k[6][i]);
            let sc = p.abs_tol + p.rel_tol * y[i].abs().max(y_new[i].abs());
            acc += (e / sc) * (e / sc);
        }
        let err = (acc / n.max(1) as f64).sqrt();
        if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            sol.termination = Termination::NonFinite {
                t,
                detail: "state overflow".into(),
            };
            return;
        }

        if err <= 1.0 {
            let t_new = if last { t_end } else { t + h };
            // Dense output on (t, t_new].
            if next_sample < grid.len() && grid[next_sample] <= t_new {
                for i in 0..n {
                    let ydiff = y_new[i] - y[i];
                    let bspl = h * k[0][i] - ydiff;
                    cont[0][i] = y[i];
                    cont[1][i] = ydiff;
                    cont[2][i] = bspl;
                    cont[3][i] = ydiff - h * k[6][i] - bspl;
                    cont[4][i] = h
                        * (D1 * k[0][i]
                            + D3 * k[2][i]
                            + D4 * k[3][i]
                            + D5 * k[4][i]
                            + D6 * k[5][i]
                            + D7 * k[6][i]);
                }
                while next_sample < grid.len() && grid[next_sample] <= t_new {
                    let ts = grid[next_sample];
                    let state = if ts == t_new {
                        y_new.clone()
                    } else {
                        let s = (ts - t) / h;
                        let s1 = 1.0 - s;
                        (0..n)
                            .map(|i| {
                                cont[0][i]
                                    + s * (cont[1][i]
                                        + s1 * (cont[2][i] + s * (cont[3][i] + s1 * cont[4][i])))
                            })
                            .collect()
                    };
                    sol.times.push(ts);
                    sol.states.push(state);
                    next_sample += 1;
                }
            }
            sol.stats.accepted += 1;
            let mut fac = err.powf(PI_EXPO) / err_old.powf(PI_BETA) / SAFETY;
            fac = fac.clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_next = h / fac;
            if last_rejected {
                h_next = h_next.min(h);
            }
            err_old = err.max(1e-4);
            last_rejected = false;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            t = t_new;
            h = h_next;
        } else {
            sol.stats.rejected += 1;
            let fac = (err.powf(PI_EXPO) / SAFETY).min(1.0 / FAC_MIN);
            h /= fac;
            last_rejected = true;
        }
    }
}

/// Largest Euclidean state discrepancy over the sample grid between a run at
/// the configured tolerances and one at tolerances scaled by 0.01.
pub fn richardson_system(
    sys: &dyn OdeSystem,
    t0: f64,
    y0: &[f64],
    cfg: &IntegratorConfig,
) -> Result<f64, IntegrateError> {
    let coarse = integrate_system(sys, t0, y0, cfg)?;
    if !coarse.termination.is_completed() {
        return Err(IntegrateError::Incomplete(coarse.termination));
    }
    let fine = integrate_system(sys, t0, y0, &cfg.scaled(0.01))?;
    if !fine.termination.is_completed() {
        return Err(IntegrateError::Incomplete(fine.termination));
    }
    Ok(coarse
        .states
        .iter()
        .zip(&fine.states)
        .map(|(a, b)| norm(&sub(a, b)))
        .fold(0.0, f64::max))
}

/// One recorded point of a flow trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub state: SystemState,
    pub diagnostics: Diagnostics,
    /// Filled in by the energy computation; `None` until then.
    pub energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub config: IntegratorConfig,
    pub termination: Termination,
    pub stats: StepStats,
    /// Identity of the forcing the flow was integrated with.
    pub perturbation_id: Option<u64>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.state.t).collect()
    }

    pub fn is_completed(&self) -> bool {
        self.termination.is_completed()
    }

    /// CSV with header `t,feasibility,gap,energy,speed_x,speed_y,speed_lambda`.
    /// Energies not yet computed are written as empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,feasibility,gap,energy,speed_x,speed_y,speed_lambda\n");
        for s in &self.samples {
            let sp = s.state.speeds();
            let energy = s.energy.map(format_float).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                format_float(s.state.t),
                format_float(s.diagnostics.feasibility),
                format_float(s.diagnostics.gap),
                energy,
                format_float(sp.x),
                format_float(sp.y),
                format_float(sp.lambda)
            ));
        }
        out
    }
}

/// Shortest decimal string that round-trips to the same `f64`; scientific
/// notation outside `[1e−4, 1e15)`.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Integrates `flow` from `init` and attaches optimality diagnostics relative
/// to the certified point `kkt` at every sample.
pub fn integrate(
    flow: &Flow,
    kkt: &KktPoint,
    init: &SystemState,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, IntegrateError> {
    let p = &flow.problem;
    p.certify(kkt)?;
    if init.dims() != (p.n1(), p.n2(), p.m()) {
        return Err(IntegrateError::Dimension {
            expected: flow.dim(),
            found: init.to_flat().len(),
        });
    }
    if !init.is_finite() {
        return Err(IntegrateError::Config("initial state is not finite".into()));
    }
    flow.schedule
        .gamma_eval(init.t)
        .map_err(DynamicsError::from)?;
    let sol = integrate_system(flow, init.t, &init.to_flat(), cfg)?;
    let (n1, n2, m) = (p.n1(), p.n2(), p.m());
    let samples = sol
        .times
        .iter()
        .zip(&sol.states)
        .map(|(&t, v)| {
            let state = SystemState::from_flat(t, v, n1, n2, m)?;
            let diagnostics = p.diagnostics_unchecked(kkt, &state.x, &state.y, &state.lambda);
            Ok(Sample {
                state,
                diagnostics,
                energy: None,
            })
        })
        .collect::<Result<Vec<_>, DynamicsError>>()?;
    Ok(Trajectory {
        samples,
        config: *cfg,
        termination: sol.termination,
        stats: sol.stats,
        perturbation_id: flow.perturbation.as_ref().map(|p| p.id()),
    })
}

/// [`richardson_system`] for a flow.
pub fn richardson_check(
    flow: &Flow,
    init: &SystemState,
    cfg: &IntegratorConfig,
) -> Result<f64, IntegrateError> {
    richardson_system(flow, init.t, &init.to_flat(), cfg)
}

/// Richardson discrepancy of an existing trajectory: compares it against a
/// fresh run from `init` at its own tolerances scaled by 0.01.
pub fn richardson_trajectory(
    flow: &Flow,
    init: &SystemState,
    traj: &Trajectory,
) -> Result<f64, IntegrateError> {
    if !traj.is_completed() {
        return Err(IntegrateError::Incomplete(traj.termination.clone()));
    }
    let fine = integrate_system(flow, init.t, &init.to_flat(), &traj.config.scaled(0.01))?;
    if !fine.termination.is_completed() {
        return Err(IntegrateError::Incomplete(fine.termination));
    }
    Ok(traj
        .samples
        .iter()
        .zip(&fine.states)
        .map(|(a, b)| norm(&sub(&a.state.to_flat(), b)))
        .fold(0.0, f64::max))
}
