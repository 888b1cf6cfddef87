//! Lyapunov energies, their coefficient functions θ(t), η(t), the algebraic
//! identities that make the energy derivative collapse, and monotonicity audits.

use serde::Serialize;
use thiserror::Error;

use crate::damping::{
    CouplingRule, DampingError, DampingSchedule, GammaCase, GammaValues, Regime, PARAM_SNAP,
};
use crate::dynamics::{Perturbation, SystemState};
use crate::integrate::Trajectory;
use crate::linalg::{dot, norm_sq};
use crate::problem::{KktPoint, ProblemError, SeparableProblem};

/// Relative tolerance for the sign and lower-bound margins.
pub const MARGIN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error("invalid energy parameters: {0}")]
    Parameters(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Damping(#[from] DampingError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "variant")]
pub enum EnergyParams {
    /// Weights `p(t)^β`, `θ = β₀p^βγ`.
    GeneralGamma { beta: f64, beta0: f64 },
    /// `γ = α/t^r`, `r ∈ (−1, 0]`, weights `t^ρ` with `ρ = (r+1)/2`.
    PowerNeg { r: f64, r0: f64, alpha: f64 },
    /// `γ = α/t^r`, `r ∈ (0, 1)`, weights `t^ρ` with `ρ = r`.
    PowerPos { r: f64, r0: f64, alpha: f64 },
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<(), LyapunovError> {
    if ok {
        Ok(())
    } else {
        Err(LyapunovError::Parameters(msg()))
    }
}

impl EnergyParams {
    pub fn general(beta: f64, beta0: f64) -> Result<Self, LyapunovError> {
        require(beta > 0.0 && beta <= 1.0 / 3.0 + PARAM_SNAP, || {
            format!("beta = {beta} outside (0, 1/3]")
        })?;
        require(
            beta0 >= 2.0 * beta - PARAM_SNAP && beta0 <= 1.0 - beta + PARAM_SNAP,
            || format!("beta0 = {beta0} outside [2 beta, 1 - beta]"),
        )?;
        Ok(Self::GeneralGamma { beta, beta0 })
    }

    pub fn power_neg(r: f64, r0: f64, alpha: f64) -> Result<Self, LyapunovError> {
        require(r > -1.0 && r <= 0.0, || format!("r = {r} outside (-1, 0]"))?;
        require(r0 > 0.5 * (1.0 + r), || {
            format!("r0 = {r0} must exceed (1 + r)/2")
        })?;
        require(alpha > 0.0, || format!("alpha = {alpha} must be positive"))?;
        Ok(Self::PowerNeg { r, r0, alpha })
    }

    pub fn power_pos(r: f64, r0: f64, alpha: f64) -> Result<Self, LyapunovError> {
        require(r > 0.0 && r < 1.0, || format!("r = {r} outside (0, 1)"))?;
        require(r0 > r, || format!("r0 = {r0} must exceed r"))?;
        require(alpha > 0.0, || format!("alpha = {alpha} must be positive"))?;
        Ok(Self::PowerPos { r, r0, alpha })
    }

    pub fn from_regime(regime: &Regime) -> Option<Self> {
        match *regime {
            Regime::GeneralGamma { beta, beta0, .. } => Some(Self::GeneralGamma { beta, beta0 }),
            Regime::PowerNeg { r, r0, alpha, .. } => Some(Self::PowerNeg { r, r0, alpha }),
            Regime::PowerPos { r, r0, alpha, .. } => Some(Self::PowerPos { r, r0, alpha }),
            Regime::Invalid { .. } => None,
        }
    }

    /// `ρ` for the power-law variants.
    pub fn rho(&self) -> Option<f64> {
        match *self {
            Self::GeneralGamma { .. } => None,
            Self::PowerNeg { r, .. } => Some(0.5 * (r + 1.0)),
            Self::PowerPos { r, .. } => Some(r),
        }
    }

    /// Checks that `s` is the schedule these parameters were derived for.
    fn check_schedule(&self, s: &DampingSchedule) -> Result<(), LyapunovError> {
        match *self {
            Self::GeneralGamma { .. } => Ok(()),
            Self::PowerNeg { r, alpha, .. } | Self::PowerPos { r, alpha, .. } => {
                match s.power_params() {
                    Some((a, rr)) if a == alpha && rr == r => Ok(()),
                    _ => Err(LyapunovError::Contract(format!(
                    "energy parameters (alpha = {alpha}, r = {r}) do not match the damping schedule"
                ))),
                }
            }
        }
    }

    fn check_coupling(&self, c: &CouplingRule) -> Result<(), LyapunovError> {
        match (*self, *c) {
            (Self::GeneralGamma { beta0, .. }, CouplingRule::ReciprocalGamma { beta0: b })
                if b == beta0 =>
            {
                Ok(())
            }
            (
                Self::PowerNeg { r0, .. } | Self::PowerPos { r0, .. },
                CouplingRule::LinearInT { r0: q },
            ) if q == r0 => Ok(()),
            _ => Err(LyapunovError::Contract(format!(
                "coupling {c:?} does not match energy parameters {self:?}"
            ))),
        }
    }

    /// θ, η, their derivatives and the velocity weight `w` (`p^β` or `t^ρ`).
    pub fn coefficients(&self, s: &DampingSchedule, t: f64) -> Result<Coefficients, LyapunovError> {
        self.check_schedule(s)?;
        let g = s.gamma_eval(t)?;
        Ok(match *self {
            Self::GeneralGamma { beta, beta0 } => {
                let w = (beta * s.log_p(t)?).exp();
                let w2 = w * w;
                let (ga, dg, ddg) = (g.gamma, g.dgamma, g.ddgamma);
                let k = beta0 + 2.0 * beta - 1.0;
                Coefficients {
                    t,
                    weight: w,
                    dweight: beta * w * ga,
                    theta: beta0 * w * ga,
                    eta: -beta0 * w2 * (k * ga * ga + dg),
                    dtheta: beta0 * w * (beta * ga * ga + dg),
                    deta: -beta0
                        * w2
                        * (2.0 * beta * k * ga * ga * ga
                            + (6.0 * beta + 2.0 * beta0 - 2.0) * ga * dg
                            + ddg),
                }
            }
            Self::PowerNeg { r, r0, alpha } => {
                let rho = 0.5 * (r + 1.0);
                let w = t.powf(rho);
                let trm1 = t.powf(r - 1.0);
                Coefficients {
                    t,
                    weight: w,
                    dweight: rho * w / t,
                    theta: 2.0 * r0 * t.powf(0.5 * (r - 1.0)),
                    eta: 2.0 * r0 * (alpha - (2.0 * r0 + r) * trm1),
                    dtheta: r0 * (r - 1.0) * t.powf(0.5 * (r - 3.0)),
                    deta: -(4.0 * r0 * r0 + 2.0 * r0 * r) * (r - 1.0) * trm1 / t,
                }
            }
            Self::PowerPos { r, r0, alpha } => {
                let w = t.powf(r);
                let trm1 = t.powf(r - 1.0);
                Coefficients {
                    t,
                    weight: w,
                    dweight: r * w / t,
                    theta: 2.0 * r0 * trm1,
                    eta: 2.0 * r0 * trm1 * ((1.0 - 2.0 * r - 2.0 * r0) * trm1 + alpha),
                    dtheta: 2.0 * r0 * (r - 1.0) * trm1 / t,
                    deta: 2.0
                        * r0
                        * (r - 1.0)
                        * (trm1 / t)
                        * ((2.0 - 4.0 * r - 4.0 * r0) * trm1 + alpha),
                }
            }
        })
    }

    /// Lower bound on η at `t` required by the regime.
    fn eta_lower_bound(&self, s: &DampingSchedule, c: &Coefficients) -> Result<f64, LyapunovError> {
        Ok(match *self {
            Self::GeneralGamma { beta, beta0 } => {
                let g = s.gamma_eval(c.t)?.gamma;
                beta0 * (1.0 - beta - beta0) * c.weight * c.weight * g * g
            }
            Self::PowerNeg { r0, alpha, .. } => r0 * alpha,
            Self::PowerPos { r, r0, alpha } => r0 * alpha * c.t.powf(r - 1.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficients {
    pub t: f64,
    /// `p(t)^β` or `t^ρ`.
    pub weight: f64,
    pub dweight: f64,
    pub theta: f64,
    pub eta: f64,
    pub dtheta: f64,
    pub deta: f64,
}

/// `(θ(t), η(t))`.
pub fn theta_eta(
    ep: &EnergyParams,
    s: &DampingSchedule,
    t: f64,
) -> Result<(f64, f64), LyapunovError> {
    let c = ep.coefficients(s, t)?;
    Ok((c.theta, c.eta))
}

fn block_energy(theta: f64, eta: f64, w: f64, z: &[f64], z_star: &[f64], v: &[f64]) -> f64 {
    let mut a = 0.0;
    let mut d2 = 0.0;
    for i in 0..z.len() {
        let d = z[i] - z_star[i];
        let u = theta * d + w * v[i];
        a += u * u;
        d2 += d * d;
    }
    0.5 * a + 0.5 * eta * d2
}

/// `E = w²·gap + Σ_z ½‖θ(z−z*) + w ż‖² + η/2 ‖z−z*‖²` over the blocks x, y, λ.
pub fn energy(
    ep: &EnergyParams,
    p: &SeparableProblem,
    k: &KktPoint,
    s: &DampingSchedule,
    st: &SystemState,
) -> Result<f64, LyapunovError> {
    let gap = p.gap_and_feasibility(k, &st.x, &st.y)?.gap;
    energy_with_gap(ep, k, s, st, gap)
}

fn energy_with_gap(
    ep: &EnergyParams,
    k: &KktPoint,
    s: &DampingSchedule,
    st: &SystemState,
    gap: f64,
) -> Result<f64, LyapunovError> {
    let c = ep.coefficients(s, st.t)?;
    let w = c.weight;
    Ok(w * w * gap
        + block_energy(c.theta, c.eta, w, &st.x, &k.x_star, &st.vx)
        + block_energy(c.theta, c.eta, w, &st.y, &k.y_star, &st.vy)
        + block_energy(c.theta, c.eta, w, &st.lambda, &k.lambda_star, &st.vlambda))
}

/// Energy at every sample, using the gap already stored in the diagnostics.
pub fn energy_series(
    ep: &EnergyParams,
    k: &KktPoint,
    s: &DampingSchedule,
    traj: &Trajectory,
) -> Result<Vec<f64>, LyapunovError> {
    traj.samples
        .iter()
        .map(|smp| energy_with_gap(ep, k, s, &smp.state, smp.diagnostics.gap))
        .collect()
}

/// Stores [`energy_series`] into the samples' `energy` fields.
pub fn attach_energy(
    ep: &EnergyParams,
    k: &KktPoint,
    s: &DampingSchedule,
    traj: &mut Trajectory,
) -> Result<(), LyapunovError> {
    let e = energy_series(ep, k, s, traj)?;
    for (smp, v) in traj.samples.iter_mut().zip(e) {
        smp.energy = Some(v);
    }
    Ok(())
}

/// Energy minus the accumulated forcing work
/// `∫ <θ(z−z*) + w ż, w ε_z> ds` over the x and y blocks, by the trapezoid rule
/// on the sample grid.
pub fn perturbed_energy(
    ep: &EnergyParams,
    traj: &Trajectory,
    pert: Option<&Perturbation>,
    k: &KktPoint,
    s: &DampingSchedule,
) -> Result<Vec<f64>, LyapunovError> {
    if traj.perturbation_id != pert.map(Perturbation::id) {
        return Err(LyapunovError::Contract(format!(
            "trajectory was integrated with perturbation {:?}, audit given {:?}",
            traj.perturbation_id,
            pert.map(Perturbation::id)
        )));
    }
    let base = energy_series(ep, k, s, traj)?;
    let Some(pert) = pert else {
        return Ok(base);
    };
    let mut integrand = Vec::with_capacity(traj.samples.len());
    for smp in &traj.samples {
        let st = &smp.state;
        let c = ep.coefficients(s, st.t)?;
        let (ex, ey) = pert.eps(st.t);
        let work = |z: &[f64], zs: &[f64], v: &[f64], e: &[f64]| -> f64 {
            let u: Vec<f64> = (0..z.len())
                .map(|i| c.theta * (z[i] - zs[i]) + c.weight * v[i])
                .collect();
            c.weight * dot(&u, e)
        };
        integrand.push(work(&st.x, &k.x_star, &st.vx, &ex) + work(&st.y, &k.y_star, &st.vy, &ey));
    }
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        if i > 0 {
            let dt = traj.samples[i].state.t - traj.samples[i - 1].state.t;
            acc += 0.5 * dt * (integrand[i] + integrand[i - 1]);
        }
        out.push(base[i] - acc);
    }
    Ok(out)
}

/// Worst normalized residuals of the identities on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    /// `w² − θ w δ`, relative to `w²`.
    pub coupling: f64,
    /// The velocity cross-term cancellation, relative to the sum of the
    /// magnitudes of its terms.
    pub cancellation: f64,
    /// Largest normalized value of `θθ̇ + η̇/2` (must be ≤ 0).
    pub sign_condition_worst: f64,
    pub sign_condition_holds: bool,
    /// Smallest normalized `η − bound` over grid points at or beyond `t1`.
    pub eta_lower_bound_margin: f64,
    pub eta_margin_holds: bool,
    /// Whether the velocity term of the energy derivative vanishes
    /// (`β₀ = 1 − β`), which weakens the speed conclusions.
    pub degenerate_velocity_margin: bool,
    pub t1: f64,
    pub grid_points: usize,
}

impl IdentityReport {
    pub fn equalities_within(&self, tol: f64) -> bool {
        self.coupling <= tol && self.cancellation <= tol
    }
}

/// Evaluates the coupling identity, the cancellation identity, the sign
/// condition and the η lower bound at each grid time.
pub fn identity_audit(
    ep: &EnergyParams,
    s: &DampingSchedule,
    c: &CouplingRule,
    grid: &[f64],
    t1: f64,
) -> Result<IdentityReport, LyapunovError> {
    ep.check_coupling(c)?;
    ep.check_schedule(s)?;
    let mut rep = IdentityReport {
        coupling: 0.0,
        cancellation: 0.0,
        sign_condition_worst: f64::NEG_INFINITY,
        sign_condition_holds: true,
        eta_lower_bound_margin: f64::INFINITY,
        eta_margin_holds: true,
        degenerate_velocity_margin: matches!(*ep, EnergyParams::GeneralGamma { beta, beta0 } if (1.0 - beta - beta0).abs() <= PARAM_SNAP),
        t1,
        grid_points: grid.len(),
    };
    for &t in grid {
        let k = ep.coefficients(s, t)?;
        let g = s.gamma_eval(t)?;
        let delta = c.delta_eval(s, t)?;
        let w = k.weight;

        let cp = (w * w - k.theta * w * delta).abs() / (w * w);
        rep.coupling = rep.coupling.max(cp);

        // General: θ(θ + (β−1)wγ) + θ̇w + η.  Power: θ(θ + ρt^{ρ−1} − αt^{ρ−r}) + η + t^ρθ̇.
        let terms: [f64; 4] = match *ep {
            EnergyParams::GeneralGamma { beta, .. } => [
                k.theta * k.theta,
                k.theta * (beta - 1.0) * w * g.gamma,
                k.dtheta * w,
                k.eta,
            ],
            EnergyParams::PowerNeg { r, alpha, .. } | EnergyParams::PowerPos { r, alpha, .. } => {
                let rho = ep.rho().expect("power variant");
                [
                    k.theta * k.theta,
                    k.theta * (rho * t.powf(rho - 1.0) - alpha * t.powf(rho - r)),
                    k.dtheta * w,
                    k.eta,
                ]
            }
        };
        let scale: f64 = terms.iter().map(|v| v.abs()).sum();
        let sum: f64 = terms.iter().sum();
        rep.cancellation = rep
            .cancellation
            .max(if scale > 0.0 { sum.abs() / scale } else { 0.0 });

        let sign_scale = sign_condition_scale(ep, &g, &k);
        let value = k.theta * k.dtheta + 0.5 * k.deta;
        let sign = if sign_scale > 0.0 {
            value / sign_scale
        } else {
            0.0
        };
        rep.sign_condition_worst = rep.sign_condition_worst.max(sign);
        if sign > MARGIN_TOL {
            rep.sign_condition_holds = false;
        }

        if t >= t1 {
            let bound = ep.eta_lower_bound(s, &k)?;
            let scale = k.eta.abs() + bound.abs();
            let margin = if scale > 0.0 {
                (k.eta - bound) / scale
            } else {
                0.0
            };
            rep.eta_lower_bound_margin = rep.eta_lower_bound_margin.min(margin);
            if margin < -MARGIN_TOL {
                rep.eta_margin_holds = false;
            }
        }
    }
    Ok(rep)
}

/// Sum of the magnitudes of the monomials making up `θθ̇ + η̇/2`, so that exact
/// cancellations are judged against the size of what cancelled.
fn sign_condition_scale(ep: &EnergyParams, g: &GammaValues, k: &Coefficients) -> f64 {
    let (t, w) = (k.t, k.weight);
    match *ep {
        EnergyParams::GeneralGamma { beta, beta0 } => {
            let (ga, dg, ddg) = (g.gamma.abs(), g.dgamma.abs(), g.ddgamma.abs());
            let kk = (beta0 + 2.0 * beta - 1.0).abs();
            k.theta.abs() * beta0 * w * (beta * ga * ga + dg)
                + 0.5
                    * beta0
                    * w
                    * w
                    * (2.0 * beta * kk * ga * ga * ga
                        + (6.0 * beta + 2.0 * beta0 - 2.0).abs() * ga * dg
                        + ddg)
        }
        EnergyParams::PowerNeg { .. } => (k.theta * k.dtheta).abs() + 0.5 * k.deta.abs(),
        EnergyParams::PowerPos { r, r0, alpha } => {
            let trm1 = t.powf(r - 1.0);
            (k.theta * k.dtheta).abs()
                + (r0 * (r - 1.0) * trm1 / t).abs()
                    * ((2.0 - 4.0 * r - 4.0 * r0).abs() * trm1 + alpha)
        }
    }
}

/// Identity audit configured from a validated regime.
pub fn identity_audit_regime(
    regime: &Regime,
    s: &DampingSchedule,
    c: &CouplingRule,
    grid: &[f64],
) -> Result<IdentityReport, LyapunovError> {
    let ep = EnergyParams::from_regime(regime)
        .ok_or_else(|| LyapunovError::Contract("invalid regime has no energy".into()))?;
    identity_audit(&ep, s, c, grid, regime.t1(s.t0()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub monotone: bool,
    pub first_violation: Option<usize>,
    /// Largest relative increase `E_{k+1}/E_k − 1` seen.
    pub worst_relative_increase: f64,
}

/// Monotone iff `E_{k+1} ≤ E_k (1 + rel_slack) + 1e−12·|E_0|` for all k.
pub fn monotonicity_audit(energy: &[f64], rel_slack: f64) -> MonotonicityReport {
    let abs_slack = energy.first().map_or(0.0, |e| 1e-12 * e.abs());
    let mut first = None;
    let mut worst = f64::NEG_INFINITY;
    for k in 1..energy.len() {
        let (prev, next) = (energy[k - 1], energy[k]);
        if prev != 0.0 {
            worst = worst.max((next - prev) / prev.abs());
        }
        if first.is_none() && !(next <= prev + rel_slack * prev.abs() + abs_slack) {
            first = Some(k);
        }
    }
    MonotonicityReport {
        monotone: first.is_none(),
        first_violation: first,
        worst_relative_increase: if worst.is_finite() { worst } else { 0.0 },
    }
}

/// Whether the regime's case supports the speed and weighted-gap conclusions.
pub fn case_supports_speeds(regime: &Regime) -> bool {
    !matches!(
        regime,
        Regime::GeneralGamma {
            case: GammaCase::Boundary,
            ..
        } | Regime::Invalid { .. }
    )
}

/// `‖z − z*‖²` summed over the primal and dual blocks; handy for tests.
pub fn distance_sq(st: &SystemState, k: &KktPoint) -> f64 {
    let d = |a: &[f64], b: &[f64]| norm_sq(&crate::linalg::sub(a, b));
    d(&st.x, &k.x_star) + d(&st.y, &k.y_star) + d(&st.lambda, &k.lambda_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::damping::{log_grid, validate_regime};
    use crate::problem::builtin::p1;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn case_two_theta_eta_closed_form() {
        for alpha in [1.0, 2.0, 2.5] {
            let t0 = 1.5;
            let s = DampingSchedule::power_law(alpha, 1.0, t0).unwrap();
            let ep = EnergyParams::general(1.0 / 3.0, 2.0 / 3.0).unwrap();
            for t in [1.5, 4.0, 90.0] {
                let (th, et) = theta_eta(&ep, &s, t).unwrap();
                let th_ref = 2.0 * alpha / (3.0 * t0.powf(alpha / 3.0)) * t.powf(alpha / 3.0 - 1.0);
                let et_ref = 2.0 * alpha / (3.0 * t0.powf(2.0 * alpha / 3.0))
                    * (1.0 - alpha / 3.0)
                    * t.powf(2.0 * alpha / 3.0 - 2.0);
                assert!(rel(th, th_ref) < 1e-13, "{th} {th_ref}");
                assert!(rel(et, et_ref) < 1e-12, "{et} {et_ref}");
            }
        }
    }

    #[test]
    fn power_neg_substitution() {
        let s = DampingSchedule::power_law(10.0, 0.0, 1.0).unwrap();
        let ep = EnergyParams::power_neg(0.0, 1.0, 10.0).unwrap();
        assert_eq!(theta_eta(&ep, &s, 1.0).unwrap(), (2.0, 16.0));
    }

    #[test]
    fn eta_reduces_to_minus_gamma_dot() {
        // β₀ + 2β = 1
        let s = DampingSchedule::log_power(0.5, E).unwrap();
        let ep = EnergyParams::general(0.25, 0.5).unwrap();
        for t in [E, 10.0, 1e3] {
            let c = ep.coefficients(&s, t).unwrap();
            let g = s.gamma_eval(t).unwrap();
            assert!(rel(c.eta, -0.5 * c.weight * c.weight * g.dgamma) < 1e-14);
            assert!(c.eta >= 0.0);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cases = [
            (
                EnergyParams::general(0.25, 0.6).unwrap(),
                DampingSchedule::power_law(4.0, 1.0, 1.0).unwrap(),
            ),
            (
                EnergyParams::general(1.0 / 3.0, 2.0 / 3.0).unwrap(),
                DampingSchedule::log_power(1.0, E).unwrap(),
            ),
            (
                EnergyParams::power_neg(-0.5, 1.0, 4.0).unwrap(),
                DampingSchedule::power_law(4.0, -0.5, 1.0).unwrap(),
            ),
            (
                EnergyParams::power_pos(0.5, 1.0, 12.0).unwrap(),
                DampingSchedule::power_law(12.0, 0.5, 1.0).unwrap(),
            ),
        ];
        for (ep, s) in cases {
            for t in [3.0, 20.0, 150.0] {
                let h = 1e-5 * t;
                let c = ep.coefficients(&s, t).unwrap();
                let (a, b) = (
                    ep.coefficients(&s, t - h).unwrap(),
                    ep.coefficients(&s, t + h).unwrap(),
                );
                // θ and η are constant for γ = 4/t with β = 1/4, so scale by value/t too.
                let close =
                    |fd: f64, d: f64, v: f64| (fd - d).abs() <= 1e-6 * (d.abs() + v.abs() / t);
                assert!(
                    close((b.theta - a.theta) / (2.0 * h), c.dtheta, c.theta),
                    "{ep:?} dtheta t={t}"
                );
                assert!(
                    close((b.eta - a.eta) / (2.0 * h), c.deta, c.eta),
                    "{ep:?} deta t={t}"
                );
                assert!(
                    close((b.weight - a.weight) / (2.0 * h), c.dweight, c.weight),
                    "{ep:?} dweight t={t}"
                );
            }
        }
    }

    #[test]
    fn energy_zero_at_rest_on_kkt_point() {
        let (p, k) = p1();
        let s = DampingSchedule::power_law(4.0, 1.0, 1.0).unwrap();
        let ep = EnergyParams::general(0.25, 0.6).unwrap();
        let st = SystemState::at_rest(
            7.0,
            k.x_star.clone(),
            k.y_star.clone(),
            k.lambda_star.clone(),
        );
        assert_eq!(energy(&ep, &p, &k, &s, &st).unwrap(), 0.0);
    }

    #[test]
    fn energy_term_by_term() {
        let (p, k) = p1();
        let s = DampingSchedule::power_law(4.0, 1.0, 1.0).unwrap();
        let ep = EnergyParams::general(0.25, 0.6).unwrap();
        let mut st = SystemState::at_rest(
            1.0,
            k.x_star.clone(),
            k.y_star.clone(),
            k.lambda_star.clone(),
        );
        st.x[0] += 1.0;
        // θ = 2.4, η = 1.44, gap = ½‖d‖² + ½‖r‖² = 1.
        let e = energy(&ep, &p, &k, &s, &st).unwrap();
        let e1 = 0.5 * 2.4 * 2.4 + 0.5 * 1.44;
        assert!((e - (1.0 + e1)).abs() < 1e-14, "{e}");
    }

    #[test]
    fn energy_block_is_quadratic() {
        let (p, k) = p1();
        let s = DampingSchedule::power_law(4.0, 1.0, 1.0).unwrap();
        let ep = EnergyParams::general(0.25, 0.6).unwrap();
        let mk = |scale: f64| {
            let mut st = SystemState::at_rest(
                2.0,
                k.x_star.clone(),
                k.y_star.clone(),
                k.lambda_star.clone(),
            );
            st.x[0] += 0.3 * scale;
            st.x[1] -= 0.1 * scale;
            st.vx = vec![0.2 * scale, 0.5 * scale];
            st
        };
        let e1 = |st: &SystemState| {
            let c = ep.coefficients(&s, st.t).unwrap();
            block_energy(c.theta, c.eta, c.weight, &st.x, &k.x_star, &st.vx)
        };
        assert!(rel(e1(&mk(2.0)), 4.0 * e1(&mk(1.0))) < 1e-14);
        assert!(energy(&ep, &p, &k, &s, &mk(1.0)).unwrap() > 0.0);
    }

    #[test]
    fn identity_examples() {
        let grid = log_grid(1.0, 1e4, 256);
        let s = DampingSchedule::power_law(4.0, 1.0, 1.0).unwrap();
        let c = CouplingRule::reciprocal(0.6).unwrap();
        let rep = identity_audit(
            &EnergyParams::general(0.25, 0.6).unwrap(),
            &s,
            &c,
            &grid,
            1.0,
        )
        .unwrap();
        assert!(rep.coupling <= 1e-13, "{rep:?}");
        assert!(
            rep.equalities_within(1e-11) && rep.sign_condition_holds && rep.eta_margin_holds,
            "{rep:?}"
        );

        let s = DampingSchedule::power_law(10.0, 0.5, 1.0).unwrap();
        let c = CouplingRule::linear(1.0).unwrap();
        let rep = identity_audit(
            &EnergyParams::power_pos(0.5, 1.0, 10.0).unwrap(),
            &s,
            &c,
            &grid,
            1.0,
        )
        .unwrap();
        assert!(rep.coupling <= 1e-13, "{rep:?}");

        // αβ = 1: the sign condition holds with equality.
        let s = DampingSchedule::power_law(3.0, 1.0, 1.0).unwrap();
        let c = CouplingRule::reciprocal(2.0 / 3.0).unwrap();
        let rep = identity_audit(
            &EnergyParams::general(1.0 / 3.0, 2.0 / 3.0).unwrap(),
            &s,
            &c,
            &grid,
            1.0,
        )
        .unwrap();
        assert!(rep.sign_condition_holds);
        assert!(rep.sign_condition_worst.abs() < 1e-12, "{rep:?}");
        assert!(rep.degenerate_velocity_margin);
    }

    #[test]
    fn mismatched_coupling_is_contract_error() {
        let s = DampingSchedule::power_law(4.0, 1.0, 1.0).unwrap();
        let ep = EnergyParams::general(0.25, 0.6).unwrap();
        for c in [
            CouplingRule::linear(1.0).unwrap(),
            CouplingRule::reciprocal(0.5).unwrap(),
        ] {
            assert!(matches!(
                identity_audit(&ep, &s, &c, &[1.0], 1.0),
                Err(LyapunovError::Contract(_))
            ));
        }
        let ep = EnergyParams::power_pos(0.5, 1.0, 12.0).unwrap();
        assert!(matches!(
            ep.coefficients(&s, 2.0),
            Err(LyapunovError::Contract(_))
        ));
    }

    #[test]
    fn monotonicity_examples() {
        assert!(monotonicity_audit(&[2.0; 10], 0.0).monotone);
        let r = monotonicity_audit(&[1.0, 2.0, 3.0], 1e-6);
        assert_eq!(r.first_violation, Some(1));
        assert!(monotonicity_audit(&[1.0, 1.0 + 5e-7, 0.5], 1e-6).monotone);
        assert!(monotonicity_audit(&[1.0], 1e-6).monotone);
    }

    #[test]
    fn regime_params_round_trip() {
        let s = DampingSchedule::power_law(12.0, 0.5, 1.0).unwrap();
        let reg = validate_regime(&s, &CouplingRule::linear(1.0).unwrap(), None);
        assert_eq!(
            EnergyParams::from_regime(&reg),
            Some(EnergyParams::PowerPos {
                r: 0.5,
                r0: 1.0,
                alpha: 12.0
            })
        );
        assert!(EnergyParams::general(0.25, 0.8).is_err());
        assert!(EnergyParams::power_neg(-0.5, 0.2, 1.0).is_err());
        assert!(EnergyParams::power_pos(0.5, 0.4, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn general_identities_hold_for_any_admissible_parameters(
            alpha in 0.5f64..10.0,
            frac in 0.0f64..1.0,
            t in 1.0f64..1e4,
        ) {
            let beta = (1.0 / 3.0f64).min(1.0 / alpha) * 0.999;
            let beta0 = 2.0 * beta + frac * (1.0 - 3.0 * beta);
            let s = DampingSchedule::power_law(alpha, 1.0, 1.0).unwrap();
            let c = CouplingRule::reciprocal(beta0).unwrap();
            let ep = EnergyParams::general(beta, beta0).unwrap();
            let rep = identity_audit(&ep, &s, &c, &[t], 1.0).unwrap();
            prop_assert!(rep.equalities_within(1e-11), "{:?}", rep);
            prop_assert!(rep.sign_condition_holds && rep.eta_margin_holds, "{:?}", rep);
        }

        #[test]
        fn power_identities_hold(r in -0.9f64..0.95, extra in 0.01f64..2.0, alpha in 0.5f64..20.0, t in 1.0f64..1e4) {
            let s = DampingSchedule::power_law(alpha, r, 1.0).unwrap();
            let (ep, r0) = if r <= 0.0 {
                let r0 = 0.5 * (1.0 + r) + extra;
                (EnergyParams::power_neg(r, r0, alpha).unwrap(), r0)
            } else {
                let r0 = r + extra;
                (EnergyParams::power_pos(r, r0, alpha).unwrap(), r0)
            };
            let c = CouplingRule::linear(r0).unwrap();
            let rep = identity_audit(&ep, &s, &c, &[t], f64::INFINITY).unwrap();
            prop_assert!(rep.equalities_within(1e-11), "{:?}", rep);
            prop_assert!(rep.sign_condition_holds, "{:?}", rep);
        }
    }
}
