//! The second-order primal-dual flow as a first-order system with state layout
//! `(x, y, λ, ẋ, ẏ, λ̇)`.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::damping::{CouplingRule, DampingError, DampingSchedule};
use crate::linalg::{dot, norm_sq};
use crate::problem::{ProblemError, SeparableProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {term} at t = {t}")]
    NonFinite { term: &'static str, t: f64 },
    #[error("state has {found} components, expected {expected}")]
    Layout { expected: usize, found: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Damping(#[from] DampingError),
}

/// A point of the flow: time, positions and velocities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemState {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub vlambda: Vec<f64>,
}

impl SystemState {
    /// Zero positions and velocities.
    pub fn zeros(t: f64, n1: usize, n2: usize, m: usize) -> Self {
        Self {
            t,
            x: vec![0.0; n1],
            y: vec![0.0; n2],
            lambda: vec![0.0; m],
            vx: vec![0.0; n1],
            vy: vec![0.0; n2],
            vlambda: vec![0.0; m],
        }
    }

    /// At rest at the given positions.
    pub fn at_rest(t: f64, x: Vec<f64>, y: Vec<f64>, lambda: Vec<f64>) -> Self {
        let (n1, n2, m) = (x.len(), y.len(), lambda.len());
        Self {
            t,
            x,
            y,
            lambda,
            vx: vec![0.0; n1],
            vy: vec![0.0; n2],
            vlambda: vec![0.0; m],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x.len(), self.y.len(), self.lambda.len())
    }

    /// Flattens in the canonical order `(x, y, λ, ẋ, ẏ, λ̇)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * (self.x.len() + self.y.len() + self.lambda.len()));
        for part in [
            &self.x,
            &self.y,
            &self.lambda,
            &self.vx,
            &self.vy,
            &self.vlambda,
        ] {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn from_flat(
        t: f64,
        v: &[f64],
        n1: usize,
        n2: usize,
        m: usize,
    ) -> Result<Self, DynamicsError> {
        let n = n1 + n2 + m;
        if v.len() != 2 * n {
            return Err(DynamicsError::Layout {
                expected: 2 * n,
                found: v.len(),
            });
        }
        let cut = [0, n1, n1 + n2, n, n + n1, n + n1 + n2, 2 * n];
        let part = |i: usize| v[cut[i]..cut[i + 1]].to_vec();
        Ok(Self {
            t,
            x: part(0),
            y: part(1),
            lambda: part(2),
            vx: part(3),
            vy: part(4),
            vlambda: part(5),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && [
                &self.x,
                &self.y,
                &self.lambda,
                &self.vx,
                &self.vy,
                &self.vlambda,
            ]
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn speeds(&self) -> Speeds {
        Speeds {
            x: norm_sq(&self.vx).sqrt(),
            y: norm_sq(&self.vy).sqrt(),
            lambda: norm_sq(&self.vlambda).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Speeds {
    pub x: f64,
    pub y: f64,
    pub lambda: f64,
}

impl Speeds {
    pub fn sum(&self) -> f64 {
        self.x + self.y + self.lambda
    }
    pub fn sum_sq(&self) -> f64 {
        self.x * self.x + self.y * self.y + self.lambda * self.lambda
    }
}

type VecFn = dyn Fn(f64, &mut [f64]) + Send + Sync;

static NEXT_PERTURBATION_ID: AtomicU64 = AtomicU64::new(1);

/// External forcing `(εx(t), εy(t))` added to the primal accelerations.
#[derive(Clone)]
pub struct Perturbation {
    id: u64,
    n1: usize,
    n2: usize,
    eps_x: Arc<VecFn>,
    eps_y: Arc<VecFn>,
    label: String,
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Perturbation")
            .field("id", &self.id)
            .field("label", &self.label)
            .finish()
    }
}

impl Perturbation {
    pub fn new(
        n1: usize,
        n2: usize,
        eps_x: impl Fn(f64, &mut [f64]) + Send + Sync + 'static,
        eps_y: impl Fn(f64, &mut [f64]) + Send + Sync + 'static,
        label: impl Into<String>,
    ) -> Self {
        Self {
            id: NEXT_PERTURBATION_ID.fetch_add(1, Ordering::Relaxed),
            n1,
            n2,
            eps_x: Arc::new(eps_x),
            eps_y: Arc::new(eps_y),
            label: label.into(),
        }
    }

    /// Scalar forcing `e(t)` broadcast to every component of both blocks.
    pub fn broadcast(
        n1: usize,
        n2: usize,
        e: impl Fn(f64) -> f64 + Send + Sync + 'static,
        label: impl Into<String>,
    ) -> Self {
        let e = Arc::new(e);
        let ey = Arc::clone(&e);
        Self::new(
            n1,
            n2,
            move |t, out| out.fill(e(t)),
            move |t, out| out.fill(ey(t)),
            label,
        )
    }

    /// `c (1 + t)^{−q}` in every component.
    pub fn power(n1: usize, n2: usize, c: f64, q: f64) -> Self {
        Self::broadcast(
            n1,
            n2,
            move |t| c * (1.0 + t).powf(-q),
            format!("power(c={c}, q={q})"),
        )
    }

    /// Piecewise-linear scalar forcing through `(times[i], values[i])`,
    /// zero outside the tabulated range, broadcast to every component.
    pub fn table(n1: usize, n2: usize, times: Vec<f64>, values: Vec<f64>) -> Self {
        let f = move |t: f64| -> f64 {
            let n = times.len();
            if n == 0 || t < times[0] || t > times[n - 1] {
                return 0.0;
            }
            let i = times.partition_point(|&s| s <= t);
            if i >= n {
                return values[n - 1];
            }
            let (t0, t1) = (times[i - 1], times[i]);
            let w = (t - t0) / (t1 - t0);
            values[i - 1] + w * (values[i] - values[i - 1])
        };
        Self::broadcast(n1, n2, f, "table")
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    pub fn eps_x_into(&self, t: f64, out: &mut [f64]) {
        (self.eps_x)(t, out)
    }

    pub fn eps_y_into(&self, t: f64, out: &mut [f64]) {
        (self.eps_y)(t, out)
    }

    /// Adds `εx(t)` to `ax` and `εy(t)` to `ay`.
    pub fn add_into(&self, t: f64, ax: &mut [f64], ay: &mut [f64]) {
        let (ex, ey) = self.eps(t);
        for (a, e) in ax.iter_mut().zip(&ex) {
            *a += e;
        }
        for (a, e) in ay.iter_mut().zip(&ey) {
            *a += e;
        }
    }

    pub fn eps(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut ex = vec![0.0; self.n1];
        let mut ey = vec![0.0; self.n2];
        self.eps_x_into(t, &mut ex);
        self.eps_y_into(t, &mut ey);
        (ex, ey)
    }

    /// `√(‖εx‖² + ‖εy‖²)`
    pub fn norm(&self, t: f64) -> f64 {
        let (ex, ey) = self.eps(t);
        (norm_sq(&ex) + norm_sq(&ey)).sqrt()
    }
}

/// Problem, damping, coupling and optional forcing: everything that defines
/// the right-hand side.
#[derive(Debug, Clone)]
pub struct Flow {
    pub problem: SeparableProblem,
    pub schedule: DampingSchedule,
    pub coupling: CouplingRule,
    pub perturbation: Option<Perturbation>,
}

impl Flow {
    pub fn new(
        problem: SeparableProblem,
        schedule: DampingSchedule,
        coupling: CouplingRule,
        perturbation: Option<Perturbation>,
    ) -> Result<Self, DynamicsError> {
        if let Some(p) = &perturbation {
            let (n1, n2) = p.dims();
            if n1 != problem.n1() || n2 != problem.n2() {
                return Err(DynamicsError::Layout {
                    expected: problem.n1() + problem.n2(),
                    found: n1 + n2,
                });
            }
        }
        Ok(Self {
            problem,
            schedule,
            coupling,
            perturbation,
        })
    }

    /// Length of the flat state.
    pub fn dim(&self) -> usize {
        2 * (self.problem.n1() + self.problem.n2() + self.problem.m())
    }

    fn diagnose_non_finite(&self, t: f64, x: &[f64], y: &[f64]) -> DynamicsError {
        let finite = |v: &[f64]| v.iter().all(|e| e.is_finite());
        let term = if !finite(&self.problem.f().gradient(x)) {
            "gradient of f"
        } else if !finite(&self.problem.g().gradient(y)) {
            "gradient of g"
        } else if self.perturbation.as_ref().is_some_and(|p| {
            let (ex, ey) = p.eps(t);
            !finite(&ex) || !finite(&ey)
        }) {
            "perturbation"
        } else {
            "acceleration"
        };
        DynamicsError::NonFinite { term, t }
    }

    /// Time derivative of `st` as a state (its `t` field is `st.t`).
    pub fn vector_field(&self, st: &SystemState) -> Result<SystemState, DynamicsError> {
        let p = &self.problem;
        if st.dims() != (p.n1(), p.n2(), p.m())
            || st.vx.len() != p.n1()
            || st.vy.len() != p.n2()
            || st.vlambda.len() != p.m()
        {
            return Err(DynamicsError::Layout {
                expected: self.dim(),
                found: st.to_flat().len(),
            });
        }
        self.schedule.gamma_eval(st.t)?;
        let flat = st.to_flat();
        let mut out = vec![0.0; flat.len()];
        self.eval_flat(st.t, &flat, &mut out)?;
        SystemState::from_flat(st.t, &out, p.n1(), p.n2(), p.m())
    }

    /// The right-hand side on the flat layout:
    ///
    /// ```text
    /// ẍ = −γẋ − ∇f(x) − Aᵀ(λ + δλ̇) − Aᵀ(Ax + By − b) + εx
    /// ÿ = −γẏ − ∇g(y) − Bᵀ(λ + δλ̇) − Bᵀ(Ax + By − b) + εy
    /// λ̈ = −γλ̇ + A(x + δẋ) + B(y + δẏ) − b
    /// ```
    pub fn eval_flat(&self, t: f64, s: &[f64], ds: &mut [f64]) -> Result<(), DynamicsError> {
        let p = &self.problem;
        let (n1, n2, m) = (p.n1(), p.n2(), p.m());
        let n = n1 + n2 + m;
        let (pos, vel) = s.split_at(n);
        let (x, rest) = pos.split_at(n1);
        let (y, lam) = rest.split_at(n2);
        let (vx, rest) = vel.split_at(n1);
        let (vy, vl) = rest.split_at(n2);

        let gamma = self.schedule.gamma_unchecked(t);
        let delta = self.coupling.delta_from_gamma(gamma, t);
        if !gamma.is_finite() || !delta.is_finite() {
            return Err(DynamicsError::NonFinite { term: "damping", t });
        }

        ds[..n].copy_from_slice(vel);
        let dvel = &mut ds[n..];
        let (ax, rest) = dvel.split_at_mut(n1);
        let (ay, al) = rest.split_at_mut(n2);

        let mut stack = [0.0; 16];
        let mut heap = Vec::new();
        let w: &mut [f64] = if m <= stack.len() {
            &mut stack[..m]
        } else {
            heap.resize(m, 0.0);
            &mut heap
        };

        // w = λ + δλ̇ + r with r = Ax + By − b; λ̈ uses r + δ(Aẋ + Bẏ).
        let rhs = p.rhs();
        for i in 0..m {
            let (ai, bi) = (p.a().row(i), p.b_matrix().row(i));
            let r = dot(ai, x) + dot(bi, y) - rhs[i];
            w[i] = lam[i] + delta * vl[i] + r;
            al[i] = -gamma * vl[i] + r + delta * (dot(ai, vx) + dot(bi, vy));
        }
        p.f().gradient_into(x, ax);
        p.g().gradient_into(y, ay);
        for (a, v) in ax.iter_mut().zip(vx) {
            *a = -*a - gamma * v;
        }
        for (a, v) in ay.iter_mut().zip(vy) {
            *a = -*a - gamma * v;
        }
        p.a().tr_mul_vec_acc(w, -1.0, ax);
        p.b_matrix().tr_mul_vec_acc(w, -1.0, ay);
        if let Some(pert) = &self.perturbation {
            pert.add_into(t, ax, ay);
        }

        if !dvel.iter().all(|v| v.is_finite()) {
            return Err(self.diagnose_non_finite(t, x, y));
        }
        Ok(())
    }
}
