//! Damping schedules γ(t), the integrating factor p(t) = exp ∫γ, coupling
//! rules δ(t) and classification of parameter regimes.

use std::f64::consts::E;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

/// Tolerance used when comparing configured parameters against the exact
/// boundary values 1/3, 2/3, 2β and 1−β.
pub const PARAM_SNAP: f64 = 1e-9;

/// Tolerance on the growth margin `γ̈ − 2β²γ³`, relative to `|γ̈| + 2β²γ³`.
pub const GROWTH_TOL: f64 = 1e-14;

/// Default grid size for growth and monotonicity spot checks.
pub const DEFAULT_GRID: usize = 512;

const QUAD_ABS_TOL: f64 = 1e-12;
const QUAD_MAX_DEPTH: u32 = 48;
const CACHE_LIMIT: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DampingError {
    #[error("time {t} precedes the schedule start t0 = {t0}")]
    Domain { t: f64, t0: f64 },
    #[error("invalid schedule parameter: {0}")]
    Parameter(String),
    #[error("quadrature for p(t) did not converge on [{a}, {b}]")]
    Quadrature { a: f64, b: f64 },
    #[error("non-finite value: {0}")]
    Numeric(String),
}

type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Oracle-defined damping with a synchronized checkpoint cache for ∫γ.
#[derive(Clone)]
pub struct CustomGamma {
    gamma: Arc<ScalarFn>,
    dgamma: Arc<ScalarFn>,
    ddgamma: Arc<ScalarFn>,
    nonincreasing: bool,
    cache: Arc<Mutex<Vec<(f64, f64)>>>,
}

impl CustomGamma {
    pub fn new(
        gamma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dgamma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        ddgamma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        nonincreasing: bool,
    ) -> Self {
        Self {
            gamma: Arc::new(gamma),
            dgamma: Arc::new(dgamma),
            ddgamma: Arc::new(ddgamma),
            nonincreasing,
            cache: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Number of cached ∫γ checkpoints.
    pub fn cached_checkpoints(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }
}

impl fmt::Debug for CustomGamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomGamma")
            .field("nonincreasing", &self.nonincreasing)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum Family {
    /// γ = α t^{−r}
    PowerLaw {
        alpha: f64,
        r: f64,
    },
    /// γ = 1/(t (ln t)^r)
    LogPower {
        r: f64,
    },
    Custom(CustomGamma),
}

/// γ and its first two derivatives at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaValues {
    pub gamma: f64,
    pub dgamma: f64,
    pub ddgamma: f64,
}

#[derive(Debug, Clone)]
pub struct DampingSchedule {
    family: Family,
    t0: f64,
}

fn param(ok: bool, msg: impl FnOnce() -> String) -> Result<(), DampingError> {
    if ok {
        Ok(())
    } else {
        Err(DampingError::Parameter(msg()))
    }
}

impl DampingSchedule {
    /// `γ(t) = α/t^r` with `α > 0`, `r ∈ (−1, 1]`, and `t0 ≥ 1` unless `r = 1`.
    pub fn power_law(alpha: f64, r: f64, t0: f64) -> Result<Self, DampingError> {
        param(alpha.is_finite() && alpha > 0.0, || {
            format!("alpha must be positive, got {alpha}")
        })?;
        param(r > -1.0 && r <= 1.0, || {
            format!("r must lie in (-1, 1], got {r}")
        })?;
        param(t0.is_finite() && t0 > 0.0, || {
            format!("t0 must be positive, got {t0}")
        })?;
        param(r == 1.0 || t0 >= 1.0, || {
            format!("t0 must be at least 1 for r < 1, got {t0}")
        })?;
        Ok(Self {
            family: Family::PowerLaw { alpha, r },
            t0,
        })
    }

    /// `γ(t) = 1/(t (ln t)^r)` with `r ∈ [0, 1]` and `t0 ≥ e`.
    pub fn log_power(r: f64, t0: f64) -> Result<Self, DampingError> {
        param((0.0..=1.0).contains(&r), || {
            format!("r must lie in [0, 1], got {r}")
        })?;
        param(t0.is_finite() && t0 >= E * (1.0 - 1e-15), || {
            format!("t0 must be at least e for logarithmic damping, got {t0}")
        })?;
        Ok(Self {
            family: Family::LogPower { r },
            t0: t0.max(E),
        })
    }

    pub fn custom(custom: CustomGamma, t0: f64) -> Result<Self, DampingError> {
        param(t0.is_finite(), || format!("t0 must be finite, got {t0}"))?;
        let s = Self {
            family: Family::Custom(custom),
            t0,
        };
        let g = s.gamma_eval(t0)?;
        param(g.gamma > 0.0, || {
            format!("gamma(t0) must be positive, got {}", g.gamma)
        })?;
        Ok(s)
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// `(α, r)` for power-law damping.
    pub fn power_params(&self) -> Option<(f64, f64)> {
        match self.family {
            Family::PowerLaw { alpha, r } => Some((alpha, r)),
            _ => None,
        }
    }

    fn check_domain(&self, t: f64) -> Result<(), DampingError> {
        if t >= self.t0 && t.is_finite() {
            Ok(())
        } else {
            Err(DampingError::Domain { t, t0: self.t0 })
        }
    }

    pub fn gamma_eval(&self, t: f64) -> Result<GammaValues, DampingError> {
        self.check_domain(t)?;
        let v = self.eval_unchecked(t);
        if !(v.gamma.is_finite() && v.dgamma.is_finite() && v.ddgamma.is_finite()) {
            return Err(DampingError::Numeric(format!(
                "gamma oracle at t = {t}: {v:?}"
            )));
        }
        Ok(v)
    }

    /// γ alone, for hot loops that have already validated the time range.
    #[inline]
    pub(crate) fn gamma_unchecked(&self, t: f64) -> f64 {
        match &self.family {
            Family::PowerLaw { alpha, r } => {
                if *r == 1.0 {
                    alpha / t
                } else if *r == 0.0 {
                    *alpha
                } else {
                    alpha * t.powf(-r)
                }
            }
            Family::LogPower { r } => {
                if *r == 1.0 {
                    1.0 / (t * t.ln())
                } else if *r == 0.0 {
                    1.0 / t
                } else {
                    1.0 / (t * t.ln().powf(*r))
                }
            }
            Family::Custom(c) => (c.gamma)(t),
        }
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> GammaValues {
        match &self.family {
            Family::PowerLaw { alpha, r } => {
                let (alpha, r) = (*alpha, *r);
                if r == 1.0 {
                    GammaValues {
                        gamma: alpha / t,
                        dgamma: -alpha / (t * t),
                        ddgamma: 2.0 * alpha / (t * t * t),
                    }
                } else if r == 0.0 {
                    GammaValues {
                        gamma: alpha,
                        dgamma: 0.0,
                        ddgamma: 0.0,
                    }
                } else {
                    let g = alpha * t.powf(-r);
                    GammaValues {
                        gamma: g,
                        dgamma: -r * g / t,
                        ddgamma: r * (r + 1.0) * g / (t * t),
                    }
                }
            }
            Family::LogPower { r } => {
                let r = *r;
                let l = t.ln();
                let lr = l.powf(r);
                let t2 = t * t;
                GammaValues {
                    gamma: 1.0 / (t * lr),
                    dgamma: -(l + r) / (t2 * lr * l),
                    ddgamma: (2.0 * l * l + 3.0 * r * l + r * (r + 1.0)) / (t2 * t * lr * l * l),
                }
            }
            Family::Custom(c) => GammaValues {
                gamma: (c.gamma)(t),
                dgamma: (c.dgamma)(t),
                ddgamma: (c.ddgamma)(t),
            },
        }
    }

    /// `∫_{t0}^t γ`, the logarithm of the integrating factor. Finite even where
    /// p(t) itself would overflow.
    pub fn log_p(&self, t: f64) -> Result<f64, DampingError> {
        self.check_domain(t)?;
        let t0 = self.t0;
        match &self.family {
            Family::PowerLaw { alpha, r } => {
                let (alpha, r) = (*alpha, *r);
                Ok(if r == 1.0 {
                    alpha * (t / t0).ln()
                } else {
                    let k = 1.0 - r;
                    alpha * (t.powf(k) - t0.powf(k)) / k
                })
            }
            Family::LogPower { r } => {
                let r = *r;
                Ok(if r == 1.0 {
                    (t.ln() / t0.ln()).ln()
                } else {
                    let k = 1.0 - r;
                    (t.ln().powf(k) - t0.ln().powf(k)) / k
                })
            }
            Family::Custom(c) => self.custom_log_p(c, t),
        }
    }

    /// `p(t) = exp ∫_{t0}^t γ`.
    pub fn p_factor(&self, t: f64) -> Result<f64, DampingError> {
        self.check_domain(t)?;
        if t == self.t0 {
            return Ok(1.0);
        }
        match &self.family {
            Family::PowerLaw { alpha, r } if *r == 1.0 => Ok((t / self.t0).powf(*alpha)),
            Family::LogPower { r } if *r == 1.0 => Ok(t.ln() / self.t0.ln()),
            _ => Ok(self.log_p(t)?.exp()),
        }
    }

    /// `∫_{t0}^t γ` by adaptive Simpson regardless of family; the reference
    /// against which the closed forms are tested.
    pub fn log_p_quadrature(&self, t: f64) -> Result<f64, DampingError> {
        self.check_domain(t)?;
        integrate_gamma(|s| self.gamma_unchecked(s), self.t0, t)
    }

    fn custom_log_p(&self, c: &CustomGamma, t: f64) -> Result<f64, DampingError> {
        let (start, base) = {
            let cache = c
                .cache
                .lock()
                .map_err(|_| DampingError::Numeric("poisoned cache".into()))?;
            match cache.partition_point(|&(s, _)| s <= t) {
                0 => (self.t0, 0.0),
                i => cache[i - 1],
            }
        };
        if start == t {
            return Ok(base);
        }
        let value = base + integrate_gamma(|s| (c.gamma)(s), start, t)?;
        let mut cache = c
            .cache
            .lock()
            .map_err(|_| DampingError::Numeric("poisoned cache".into()))?;
        if cache.len() < CACHE_LIMIT {
            let i = cache.partition_point(|&(s, _)| s < t);
            if cache.get(i).is_none_or(|&(s, _)| s != t) {
                cache.insert(i, (t, value));
            }
        }
        Ok(value)
    }

    /// Whether ∫γ = ∞ over [t0, ∞). Exact for built-in families; for custom
    /// oracles the tail-growth heuristic p(10⁶ t0) > 10³ is used.
    pub fn integral_diverges(&self) -> Result<DivergenceReport, DampingError> {
        match self.family {
            Family::PowerLaw { .. } | Family::LogPower { .. } => Ok(DivergenceReport {
                diverges: true,
                heuristic: false,
            }),
            Family::Custom(_) => {
                let lp = self.log_p(1e6 * self.t0)?;
                Ok(DivergenceReport {
                    diverges: lp > 1e3_f64.ln(),
                    heuristic: true,
                })
            }
        }
    }

    /// Whether γ is nonincreasing: exact for built-ins, a 64-point log-grid
    /// spot check of γ̇ ≤ 0 for custom schedules declared nonincreasing.
    pub fn is_nonincreasing(&self) -> bool {
        match &self.family {
            Family::PowerLaw { r, .. } => *r >= 0.0,
            Family::LogPower { .. } => true,
            Family::Custom(c) => {
                c.nonincreasing
                    && log_grid(self.t0, 1e6 * self.t0, 64)
                        .into_iter()
                        .all(|t| (c.dgamma)(t) <= 0.0)
            }
        }
    }

    /// Evaluates `γ̈ − 2β²γ³` over a log grid on `[t0, 10⁶ t0]`.
    pub fn check_growth(
        &self,
        beta: f64,
        grid_size: usize,
    ) -> Result<GrowthCertificate, DampingError> {
        param(beta > 0.0 && beta <= 1.0 / 3.0 + PARAM_SNAP, || {
            format!("beta must lie in (0, 1/3], got {beta}")
        })?;
        let grid = log_grid(self.t0, 1e6 * self.t0, grid_size.max(2));
        if let Family::PowerLaw { alpha, r } = self.family {
            if r == 1.0 {
                // γ̈ − 2β²γ³ = (2α/t³)(1 − (αβ)²); sign decided by αβ ≤ 1.
                let ab = alpha * beta;
                let holds = ab <= 1.0 + 1e-12;
                let (worst_t, worst) = grid
                    .iter()
                    .map(|&t| (t, 2.0 * alpha / (t * t * t) * (1.0 - ab * ab)))
                    .fold(
                        (self.t0, f64::INFINITY),
                        |a, b| if b.1 < a.1 { b } else { a },
                    );
                let worst_margin = if holds {
                    worst.max(0.0)
                } else {
                    worst.min(-f64::MIN_POSITIVE)
                };
                return Ok(GrowthCertificate {
                    beta,
                    holds,
                    worst_margin,
                    worst_t,
                    exact: true,
                });
            }
        }
        // Both sides decay like powers of t, so the tolerance is taken
        // relative to their size; a fixed absolute floor would accept any
        // violation far enough out on the grid.
        let mut worst = f64::INFINITY;
        let mut worst_t = self.t0;
        let mut holds = true;
        for &t in &grid {
            let v = self.gamma_eval(t)?;
            let rhs = 2.0 * beta * beta * v.gamma.powi(3);
            let m = v.ddgamma - rhs;
            if m < -GROWTH_TOL * (v.ddgamma.abs() + rhs) {
                holds = false;
            }
            if m < worst {
                worst = m;
                worst_t = t;
            }
        }
        Ok(GrowthCertificate {
            beta,
            holds,
            worst_margin: if holds { worst.max(0.0) } else { worst },
            worst_t,
            exact: false,
        })
    }

    /// `γ̇ + βγ² ≤ 1e−14` on a log grid over `[t0, 10⁶ t0]`.
    pub fn lemma_a1_check(&self, beta: f64, grid_size: usize) -> Result<bool, DampingError> {
        for t in log_grid(self.t0, 1e6 * self.t0, grid_size.max(2)) {
            let v = self.gamma_eval(t)?;
            if v.dgamma + beta * v.gamma * v.gamma > GROWTH_TOL {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Largest β ≤ 1/3 for which growth is known to hold in closed form.
    pub fn suggested_beta(&self) -> Option<f64> {
        match self.family {
            Family::PowerLaw { alpha, r } if r == 1.0 => Some((1.0 / 3.0_f64).min(1.0 / alpha)),
            Family::LogPower { .. } => Some(1.0 / 3.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub diverges: bool,
    pub heuristic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthCertificate {
    pub beta: f64,
    pub holds: bool,
    /// Minimum over the grid of `γ̈ − 2β²γ³`.
    pub worst_margin: f64,
    pub worst_t: f64,
    /// Decided by the closed-form criterion αβ ≤ 1 rather than the grid.
    pub exact: bool,
}

/// `n` log-spaced points from `a` to `b`, both endpoints exact.
pub fn log_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let ratio = (b / a).ln();
    let mut g: Vec<f64> = (0..n)
        .map(|i| a * (ratio * i as f64 / (n - 1) as f64).exp())
        .collect();
    g[0] = a;
    g[n - 1] = b;
    g
}

fn simpson_panel(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    fa: f64,
    m: f64,
    fm: f64,
    b: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Option<f64> {
    let (lm, flm, left) = simpson_panel(f, a, fa, m, fm);
    let (rm, frm, right) = simpson_panel(f, m, fm, b, fb);
    let diff = left + right - whole;
    if !diff.is_finite() {
        return None;
    }
    if diff.abs() <= 15.0 * tol {
        return Some(left + right + diff / 15.0);
    }
    if depth == 0 {
        return None;
    }
    let l = adaptive_simpson(f, a, fa, lm, flm, m, fm, left, 0.5 * tol, depth - 1)?;
    let r = adaptive_simpson(f, m, fm, rm, frm, b, fb, right, 0.5 * tol, depth - 1)?;
    Some(l + r)
}

/// `∫_a^b γ` by adaptive Simpson on geometric chunks of ratio at most 2.
fn integrate_gamma(f: impl Fn(f64) -> f64, a: f64, b: f64) -> Result<f64, DampingError> {
    if b <= a {
        return Ok(0.0);
    }
    let chunks = if a > 0.0 {
        ((b / a).log2().ceil() as usize).max(1)
    } else {
        1
    };
    let edges = if a > 0.0 {
        log_grid(a, b, chunks + 1)
    } else {
        vec![a, b]
    };
    let tol = QUAD_ABS_TOL / edges.len() as f64;
    let mut total = 0.0;
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let (flo, fhi) = (f(lo), f(hi));
        let (m, fm, whole) = simpson_panel(&f, lo, flo, hi, fhi);
        total += adaptive_simpson(&f, lo, flo, m, fm, hi, fhi, whole, tol, QUAD_MAX_DEPTH)
            .ok_or(DampingError::Quadrature { a: lo, b: hi })?;
    }
    Ok(total)
}

/// The coupling δ(t) between primal and dual velocity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CouplingRule {
    /// δ = 1/(β₀ γ)
    ReciprocalGamma { beta0: f64 },
    /// δ = t/(2 r₀)
    LinearInT { r0: f64 },
}

impl CouplingRule {
    pub fn reciprocal(beta0: f64) -> Result<Self, DampingError> {
        param(beta0 > 0.0 && beta0 < 1.0, || {
            format!("beta0 must lie in (0, 1), got {beta0}")
        })?;
        Ok(Self::ReciprocalGamma { beta0 })
    }

    pub fn linear(r0: f64) -> Result<Self, DampingError> {
        param(r0.is_finite() && r0 > 0.0, || {
            format!("r0 must be positive, got {r0}")
        })?;
        Ok(Self::LinearInT { r0 })
    }

    pub fn delta_eval(&self, s: &DampingSchedule, t: f64) -> Result<f64, DampingError> {
        s.check_domain(t)?;
        let d = self.delta_unchecked(s, t);
        if d.is_finite() && d > 0.0 {
            Ok(d)
        } else {
            Err(DampingError::Numeric(format!("delta({t}) = {d}")))
        }
    }

    #[inline]
    pub(crate) fn delta_unchecked(&self, s: &DampingSchedule, t: f64) -> f64 {
        self.delta_from_gamma(s.gamma_unchecked(t), t)
    }

    #[inline]
    pub(crate) fn delta_from_gamma(&self, gamma: f64, t: f64) -> f64 {
        match *self {
            Self::ReciprocalGamma { beta0 } => 1.0 / (beta0 * gamma),
            Self::LinearInT { r0 } => t / (2.0 * r0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GammaCase {
    /// β < 1/3 with β₀ strictly inside (2β, 1−β).
    CaseI,
    /// β = 1/3, β₀ = 2/3.
    CaseII,
    /// β < 1/3 with β₀ on an endpoint of [2β, 1−β]; only the gap, feasibility
    /// and weighted-feasibility conclusions apply.
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "regime")]
pub enum Regime {
    GeneralGamma {
        beta: f64,
        beta0: f64,
        case: GammaCase,
        growth: GrowthCertificate,
    },
    /// Linear coupling over `γ = α/t^r` with `r ∈ (−1, 0]`.
    PowerNeg {
        r: f64,
        r0: f64,
        alpha: f64,
        t1: f64,
        bound_at_t0: bool,
    },
    /// Linear coupling over `γ = α/t^r` with `r ∈ (0, 1)`.
    PowerPos {
        r: f64,
        r0: f64,
        alpha: f64,
        t1: f64,
        bound_at_t0: bool,
    },
    Invalid {
        reason: String,
    },
}

impl Regime {
    pub fn is_valid(&self) -> bool {
        !matches!(self, Regime::Invalid { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::GeneralGamma { .. } => "general_gamma",
            Regime::PowerNeg { .. } => "power_neg",
            Regime::PowerPos { .. } => "power_pos",
            Regime::Invalid { .. } => "invalid",
        }
    }

    /// Time from which the positivity bounds on η are claimed.
    pub fn t1(&self, t0: f64) -> f64 {
        match self {
            Regime::PowerNeg { t1, .. } | Regime::PowerPos { t1, .. } => *t1,
            _ => t0,
        }
    }
}

/// Default β for reciprocal coupling: the largest value the general theory
/// admits, `min(1/3, 1/α, β₀/2, 1−β₀)` (the 1/α term only for γ = α/t).
pub fn default_beta(s: &DampingSchedule, beta0: f64) -> f64 {
    let mut b = (1.0 / 3.0_f64).min(0.5 * beta0).min(1.0 - beta0);
    if let Family::PowerLaw { alpha, r } = s.family {
        if r == 1.0 {
            b = b.min(1.0 / alpha);
        }
    }
    b
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= PARAM_SNAP
}

/// Classifies `(s, c, β)`. For linear coupling β is ignored and `(r, r₀)`
/// come from the schedule and the rule.
pub fn validate_regime(s: &DampingSchedule, c: &CouplingRule, beta: Option<f64>) -> Regime {
    let invalid = |reason: String| Regime::Invalid { reason };
    match *c {
        CouplingRule::ReciprocalGamma { beta0 } => {
            let beta = beta.unwrap_or_else(|| default_beta(s, beta0));
            if !(beta > 0.0 && beta <= 1.0 / 3.0 + PARAM_SNAP) {
                return invalid(format!("beta = {beta} must lie in (0, 1/3]"));
            }
            let growth = match s.check_growth(beta, DEFAULT_GRID) {
                Ok(g) => g,
                Err(e) => return invalid(e.to_string()),
            };
            if !growth.holds {
                let hint = s
                    .suggested_beta()
                    .map(|b| format!("; beta = {b} satisfies it"))
                    .unwrap_or_default();
                return invalid(format!(
                    "growth condition fails for beta = {beta} (worst margin {:e} at t = {}){hint}",
                    growth.worst_margin, growth.worst_t
                ));
            }
            if !s.is_nonincreasing() {
                return invalid("damping must be nonincreasing".into());
            }
            let case = if close(beta, 1.0 / 3.0) {
                if close(beta0, 2.0 / 3.0) {
                    GammaCase::CaseII
                } else {
                    return invalid(format!("beta = 1/3 requires beta0 = 2/3, got {beta0}"));
                }
            } else if close(beta0, 2.0 * beta) || close(beta0, 1.0 - beta) {
                GammaCase::Boundary
            } else if beta0 > 2.0 * beta && beta0 < 1.0 - beta {
                GammaCase::CaseI
            } else {
                return invalid(format!(
                    "beta0 = {beta0} lies outside [2 beta, 1 - beta] = [{}, {}]",
                    2.0 * beta,
                    1.0 - beta
                ));
            };
            Regime::GeneralGamma {
                beta,
                beta0,
                case,
                growth,
            }
        }
        CouplingRule::LinearInT { r0 } => {
            let Some((alpha, r)) = s.power_params() else {
                return invalid("linear coupling requires power-law damping".into());
            };
            let t0 = s.t0();
            if r > -1.0 && r <= 0.0 {
                let bound = 0.5 * (1.0 + r);
                if r0 <= bound {
                    return invalid(format!("r0 = {r0} must exceed (1 + r)/2 = {bound}"));
                }
                let t1 = alpha_threshold(alpha, 4.0 * r0 + r + 1.0, r, t0);
                Regime::PowerNeg {
                    r,
                    r0,
                    alpha,
                    t1,
                    bound_at_t0: t1 == t0,
                }
            } else if r > 0.0 && r < 1.0 {
                if r0 <= r {
                    return invalid(format!("r0 = {r0} must exceed r = {r}"));
                }
                let t1 = alpha_threshold(alpha, 4.0 * r0 + 2.0 * r, r, t0);
                Regime::PowerPos {
                    r,
                    r0,
                    alpha,
                    t1,
                    bound_at_t0: t1 == t0,
                }
            } else {
                invalid(format!("linear coupling requires r in (-1, 1), got {r}"))
            }
        }
    }
}

/// `inf { t ≥ t0 : α > c t^{r−1} }` by bisection. The right side decreases
/// in t because r < 1.
pub fn alpha_threshold(alpha: f64, c: f64, r: f64, t0: f64) -> f64 {
    let holds = |t: f64| alpha > c * t.powf(r - 1.0);
    if holds(t0) {
        return t0;
    }
    let mut lo = t0;
    let mut hi = 2.0 * t0;
    while !holds(hi) {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
