//! Separable convex problems `min f(x) + g(y)  s.t.  Ax + By = b`, their KKT
//! certificates, the augmented Lagrangian and the residual/gap functionals.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm, norm_sq, sub, LinalgError, Lu, Matrix};

/// Certificate tolerance used for factory-built problems.
pub const FACTORY_KKT_TOL: f64 = 1e-10;

/// Gap values in `[-GAP_CLAMP, 0)` are reported as exactly zero.
pub const GAP_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(
        "KKT certificate rejected: residuals ({stationarity_x:e}, {stationarity_y:e}, {primal:e}) exceed tolerance {tol:e}"
    )]
    Certificate {
        stationarity_x: f64,
        stationarity_y: f64,
        primal: f64,
        tol: f64,
    },
    #[error("{0} is not symmetric positive semidefinite")]
    NotConvex(&'static str),
    #[error("KKT system could not be solved: {0}")]
    Factory(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("only quadratic problems have a JSON form")]
    NotSerializable,
    #[error("problem document: {0}")]
    Document(String),
}

/// A convex, continuously differentiable objective block.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient_into(&self, x: &[f64], out: &mut [f64]);

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient_into(x, &mut g);
        g
    }

    /// Bregman divergence `f(x) - f(z) - <grad f(z), x - z>`.
    fn bregman(&self, x: &[f64], z: &[f64]) -> f64 {
        let d = sub(x, z);
        self.value(x) - self.value(z) - dot(&self.gradient(z), &d)
    }
}

/// `½ xᵀPx + qᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub p: Matrix,
    pub q: Vec<f64>,
}

impl Quadratic {
    pub fn new(p: Matrix, q: Vec<f64>, name: &'static str) -> Result<Self, ProblemError> {
        if p.rows() != p.cols() {
            return Err(ProblemError::Dimension {
                what: name,
                expected: p.rows(),
                found: p.cols(),
            });
        }
        if q.len() != p.rows() {
            return Err(ProblemError::Dimension {
                what: "linear term",
                expected: p.rows(),
                found: q.len(),
            });
        }
        let scale = p.max_abs().max(1.0);
        if p.max_asymmetry() > 1e-12 * scale || !p.is_psd(1e-12) {
            return Err(ProblemError::NotConvex(name));
        }
        Ok(Self { p, q })
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        0.5 * self.p.quad_form(x) + dot(&self.q, x)
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        self.p.mul_vec_into(x, out);
        for (o, q) in out.iter_mut().zip(&self.q) {
            *o += q;
        }
    }

    // Exact: avoids the cancellation of the generic value-difference form.
    fn bregman(&self, x: &[f64], z: &[f64]) -> f64 {
        0.5 * self.p.quad_form(&sub(x, z))
    }
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// User-supplied objective from a value and a gradient closure. Convexity is
/// the caller's responsibility.
#[derive(Clone)]
pub struct FnObjective {
    dim: usize,
    value: Arc<ValueFn>,
    grad: Arc<GradFn>,
}

impl FnObjective {
    pub fn new(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Arc::new(value),
            grad: Arc::new(grad),
        }
    }
}

impl Objective for FnObjective {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out)
    }
}

/// Raw quadratic data kept alongside the problem so it can be written back out.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticData {
    pub p: Matrix,
    pub q: Vec<f64>,
    pub r: Matrix,
    pub s: Vec<f64>,
}

#[derive(Clone)]
pub struct SeparableProblem {
    f: Arc<dyn Objective>,
    g: Arc<dyn Objective>,
    a: Matrix,
    b_mat: Matrix,
    b: Vec<f64>,
    quadratic: Option<QuadraticData>,
}

impl fmt::Debug for SeparableProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeparableProblem")
            .field("n1", &self.n1())
            .field("n2", &self.n2())
            .field("m", &self.m())
            .field("quadratic", &self.quadratic.is_some())
            .finish()
    }
}

impl SeparableProblem {
    pub fn new(
        f: Arc<dyn Objective>,
        g: Arc<dyn Objective>,
        a: Matrix,
        b_mat: Matrix,
        b: Vec<f64>,
    ) -> Result<Self, ProblemError> {
        let m = b.len();
        let checks = [
            ("rows of A", m, a.rows()),
            ("rows of B", m, b_mat.rows()),
            ("columns of A", f.dim(), a.cols()),
            ("columns of B", g.dim(), b_mat.cols()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(ProblemError::Dimension {
                    what,
                    expected,
                    found,
                });
            }
        }
        if !a.is_finite() || !b_mat.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::Document("non-finite constraint data".into()));
        }
        Ok(Self {
            f,
            g,
            a,
            b_mat,
            b,
            quadratic: None,
        })
    }

    pub fn n1(&self) -> usize {
        self.a.cols()
    }
    pub fn n2(&self) -> usize {
        self.b_mat.cols()
    }
    pub fn m(&self) -> usize {
        self.b.len()
    }
    pub fn f(&self) -> &dyn Objective {
        self.f.as_ref()
    }
    pub fn g(&self) -> &dyn Objective {
        self.g.as_ref()
    }
    pub fn a(&self) -> &Matrix {
        &self.a
    }
    pub fn b_matrix(&self) -> &Matrix {
        &self.b_mat
    }
    pub fn rhs(&self) -> &[f64] {
        &self.b
    }
    pub fn quadratic(&self) -> Option<&QuadraticData> {
        self.quadratic.as_ref()
    }

    pub(crate) fn check_dims(
        &self,
        x: &[f64],
        y: &[f64],
        lambda: Option<&[f64]>,
    ) -> Result<(), ProblemError> {
        if x.len() != self.n1() {
            return Err(ProblemError::Dimension {
                what: "x",
                expected: self.n1(),
                found: x.len(),
            });
        }
        if y.len() != self.n2() {
            return Err(ProblemError::Dimension {
                what: "y",
                expected: self.n2(),
                found: y.len(),
            });
        }
        if let Some(l) = lambda {
            if l.len() != self.m() {
                return Err(ProblemError::Dimension {
                    what: "lambda",
                    expected: self.m(),
                    found: l.len(),
                });
            }
        }
        Ok(())
    }

    /// `out = Ax + By - b` without dimension checks.
    pub(crate) fn residual_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.a.row(i), x) + dot(self.b_mat.row(i), y) - self.b[i];
        }
    }

    pub fn residual(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, ProblemError> {
        self.check_dims(x, y, None)?;
        let mut r = vec![0.0; self.m()];
        self.residual_into(x, y, &mut r);
        Ok(r)
    }

    /// `f(x) + g(y) + <λ, Ax+By-b> + ½‖Ax+By-b‖²`.
    pub fn augmented_lagrangian(
        &self,
        x: &[f64],
        y: &[f64],
        lambda: &[f64],
    ) -> Result<f64, ProblemError> {
        self.check_dims(x, y, Some(lambda))?;
        let r = self.residual(x, y)?;
        Ok(self.f.value(x) + self.g.value(y) + dot(lambda, &r) + 0.5 * norm_sq(&r))
    }

    pub fn kkt_residuals(
        &self,
        x: &[f64],
        y: &[f64],
        lambda: &[f64],
    ) -> Result<KktResiduals, ProblemError> {
        self.check_dims(x, y, Some(lambda))?;
        let mut sx = self.f.gradient(x);
        self.a.tr_mul_vec_acc(lambda, 1.0, &mut sx);
        let mut sy = self.g.gradient(y);
        self.b_mat.tr_mul_vec_acc(lambda, 1.0, &mut sy);
        let r = self.residual(x, y)?;
        Ok(KktResiduals {
            stationarity_x: norm(&sx),
            stationarity_y: norm(&sy),
            primal_residual: norm(&r),
        })
    }

    /// Checks `k` against this problem at its recorded tolerance.
    pub fn certify(&self, k: &KktPoint) -> Result<(), ProblemError> {
        let res = self.kkt_residuals(&k.x_star, &k.y_star, &k.lambda_star)?;
        if res.max() > k.tol || !res.max().is_finite() {
            return Err(ProblemError::Certificate {
                stationarity_x: res.stationarity_x,
                stationarity_y: res.stationarity_y,
                primal: res.primal_residual,
                tol: k.tol,
            });
        }
        Ok(())
    }

    /// Lagrangian gap `L(x,y,λ*) - L(x*,y*,λ*)` and feasibility `‖Ax+By-b‖`.
    ///
    /// The gap is evaluated through its Bregman decomposition
    /// `D_f(x,x*) + D_g(y,y*) + <∇f(x*)+Aᵀλ*, x-x*> + <∇g(y*)+Bᵀλ*, y-y*> + ½‖r‖² - ½‖r*‖²`,
    /// which is algebraically identical to the Lagrangian difference but keeps
    /// full relative accuracy as the trajectory approaches the saddle point.
    pub fn gap_and_feasibility(
        &self,
        k: &KktPoint,
        x: &[f64],
        y: &[f64],
    ) -> Result<Optimality, ProblemError> {
        self.certify(k)?;
        self.check_dims(x, y, None)?;
        Ok(self.optimality_unchecked(k, x, y))
    }

    pub(crate) fn optimality_unchecked(&self, k: &KktPoint, x: &[f64], y: &[f64]) -> Optimality {
        let mut r = vec![0.0; self.m()];
        self.residual_into(x, y, &mut r);
        let mut r_star = vec![0.0; self.m()];
        self.residual_into(&k.x_star, &k.y_star, &mut r_star);

        let mut sx = self.f.gradient(&k.x_star);
        self.a.tr_mul_vec_acc(&k.lambda_star, 1.0, &mut sx);
        let mut sy = self.g.gradient(&k.y_star);
        self.b_mat.tr_mul_vec_acc(&k.lambda_star, 1.0, &mut sy);

        let dx = sub(x, &k.x_star);
        let dy = sub(y, &k.y_star);
        let mut gap = self.f.bregman(x, &k.x_star)
            + self.g.bregman(y, &k.y_star)
            + dot(&sx, &dx)
            + dot(&sy, &dy)
            + 0.5 * norm_sq(&r)
            - 0.5 * norm_sq(&r_star);
        if (-GAP_CLAMP..0.0).contains(&gap) {
            gap = 0.0;
        }
        Optimality {
            gap,
            feasibility: norm(&r),
        }
    }

    /// Full diagnostic record at a state.
    pub fn diagnostics(
        &self,
        k: &KktPoint,
        x: &[f64],
        y: &[f64],
        lambda: &[f64],
    ) -> Result<Diagnostics, ProblemError> {
        let opt = self.gap_and_feasibility(k, x, y)?;
        let res = self.kkt_residuals(x, y, lambda)?;
        Ok(Diagnostics::from_parts(opt, res))
    }

    pub(crate) fn diagnostics_unchecked(
        &self,
        k: &KktPoint,
        x: &[f64],
        y: &[f64],
        lambda: &[f64],
    ) -> Diagnostics {
        let opt = self.optimality_unchecked(k, x, y);
        let res = self
            .kkt_residuals(x, y, lambda)
            .expect("dimensions validated by caller");
        Diagnostics::from_parts(opt, res)
    }

    /// Compares both gradient oracles with central differences of the value
    /// oracles at `probes` random points drawn from a fixed-seed generator.
    pub fn validate_gradients(&self, seed: u64, probes: usize, step: f64) -> GradientCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0_f64;
        for _ in 0..probes {
            for obj in [self.f.as_ref(), self.g.as_ref()] {
                let n = obj.dim();
                let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let grad = obj.gradient(&x);
                for i in 0..n {
                    let xi = x[i];
                    x[i] = xi + step;
                    let fp = obj.value(&x);
                    x[i] = xi - step;
                    let fm = obj.value(&x);
                    x[i] = xi;
                    let fd = (fp - fm) / (2.0 * step);
                    let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
                    worst = worst.max(err);
                }
            }
        }
        GradientCheck {
            seed,
            probes,
            max_rel_error: worst,
        }
    }

    pub fn to_document(&self) -> Result<ProblemDocument, ProblemError> {
        let q = self
            .quadratic
            .as_ref()
            .ok_or(ProblemError::NotSerializable)?;
        Ok(ProblemDocument {
            n1: self.n1(),
            n2: self.n2(),
            m: self.m(),
            a: self.a.to_rows(),
            b_mat: self.b_mat.to_rows(),
            b: self.b.clone(),
            quadratic: QuadraticDocument {
                p: q.p.to_rows(),
                q: q.q.clone(),
                r: q.r.to_rows(),
                s: q.s.clone(),
            },
        })
    }

    pub fn to_json(&self) -> Result<String, ProblemError> {
        serde_json::to_string_pretty(&self.to_document()?)
            .map_err(|e| ProblemError::Document(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    pub seed: u64,
    pub probes: usize,
    pub max_rel_error: f64,
}

impl GradientCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// A candidate saddle point `(x*, y*, λ*)` together with the tolerance it is
/// certified to.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub x_star: Vec<f64>,
    pub y_star: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub tol: f64,
}

impl KktPoint {
    pub fn new(x_star: Vec<f64>, y_star: Vec<f64>, lambda_star: Vec<f64>, tol: f64) -> Self {
        Self {
            x_star,
            y_star,
            lambda_star,
            tol,
        }
    }

    /// Saddle value `L(x*, y*, λ*)`.
    pub fn saddle_value(&self, p: &SeparableProblem) -> Result<f64, ProblemError> {
        p.augmented_lagrangian(&self.x_star, &self.y_star, &self.lambda_star)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    pub stationarity_x: f64,
    pub stationarity_y: f64,
    pub primal_residual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity_x
            .max(self.stationarity_y)
            .max(self.primal_residual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Optimality {
    pub gap: f64,
    pub feasibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    pub gap: f64,
    pub feasibility: f64,
    pub stationarity_x: f64,
    pub stationarity_y: f64,
    pub primal_residual: f64,
}

impl Diagnostics {
    fn from_parts(o: Optimality, r: KktResiduals) -> Self {
        Self {
            gap: o.gap,
            feasibility: o.feasibility,
            stationarity_x: r.stationarity_x,
            stationarity_y: r.stationarity_y,
            primal_residual: r.primal_residual,
        }
    }
}

/// Builds `f(x) = ½xᵀPx + qᵀx`, `g(y) = ½yᵀRy + sᵀy` with the given coupling,
/// and solves the KKT system
///
/// ```text
/// [ P  0  Aᵀ ] [x]   [-q]
/// [ 0  R  Bᵀ ] [y] = [-s]
/// [ A  B  0  ] [λ]   [ b]
/// ```
///
/// by dense LU. The returned point is certified to [`FACTORY_KKT_TOL`].
pub fn make_quadratic_problem(
    p: Matrix,
    q: Vec<f64>,
    r: Matrix,
    s: Vec<f64>,
    a: Matrix,
    b_mat: Matrix,
    b: Vec<f64>,
) -> Result<(SeparableProblem, KktPoint), ProblemError> {
    let f = Quadratic::new(p.clone(), q.clone(), "P")?;
    let g = Quadratic::new(r.clone(), s.clone(), "R")?;
    let mut problem = SeparableProblem::new(Arc::new(f), Arc::new(g), a, b_mat, b)?;
    problem.quadratic = Some(QuadraticData { p, q, r, s });

    let (n1, n2, m) = (problem.n1(), problem.n2(), problem.m());
    let n = n1 + n2 + m;
    let mut k = Matrix::zeros(n, n);
    let quad = problem.quadratic.as_ref().expect("just set");
    for i in 0..n1 {
        for j in 0..n1 {
            k[(i, j)] = quad.p[(i, j)];
        }
    }
    for i in 0..n2 {
        for j in 0..n2 {
            k[(n1 + i, n1 + j)] = quad.r[(i, j)];
        }
    }
    for c in 0..m {
        for j in 0..n1 {
            let v = problem.a[(c, j)];
            k[(n1 + n2 + c, j)] = v;
            k[(j, n1 + n2 + c)] = v;
        }
        for j in 0..n2 {
            let v = problem.b_mat[(c, j)];
            k[(n1 + n2 + c, n1 + j)] = v;
            k[(n1 + j, n1 + n2 + c)] = v;
        }
    }
    let rhs: Vec<f64> = quad
        .q
        .iter()
        .map(|v| -v)
        .chain(quad.s.iter().map(|v| -v))
        .chain(problem.b.iter().copied())
        .collect();
    let lu = Lu::factor(&k, 1e-13).map_err(|e| ProblemError::Factory(e.to_string()))?;
    let sol = lu.solve(&rhs);
    let kkt = KktPoint::new(
        sol[..n1].to_vec(),
        sol[n1..n1 + n2].to_vec(),
        sol[n1 + n2..].to_vec(),
        FACTORY_KKT_TOL,
    );
    problem
        .certify(&kkt)
        .map_err(|e| ProblemError::Factory(format!("inconsistent KKT system: {e}")))?;
    Ok((problem, kkt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticDocument {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub s: Vec<f64>,
}

/// JSON form of a quadratic problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    pub n1: usize,
    pub n2: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b_mat: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub quadratic: QuadraticDocument,
}

impl ProblemDocument {
    pub fn build(&self) -> Result<(SeparableProblem, KktPoint), ProblemError> {
        let a = Matrix::from_rows(&self.a, self.n1)?;
        let bm = Matrix::from_rows(&self.b_mat, self.n2)?;
        let p = Matrix::from_rows(&self.quadratic.p, self.n1)?;
        let r = Matrix::from_rows(&self.quadratic.r, self.n2)?;
        let declared = [
            ("rows of A", self.m, a.rows()),
            ("columns of A", self.n1, a.cols()),
            ("rows of B", self.m, bm.rows()),
            ("columns of B", self.n2, bm.cols()),
            ("length of b", self.m, self.b.len()),
            ("rows of P", self.n1, p.rows()),
            ("rows of R", self.n2, r.rows()),
        ];
        for (what, expected, found) in declared {
            if expected != found {
                return Err(ProblemError::Dimension {
                    what,
                    expected,
                    found,
                });
            }
        }
        make_quadratic_problem(
            p,
            self.quadratic.q.clone(),
            r,
            self.quadratic.s.clone(),
            a,
            bm,
            self.b.clone(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self, ProblemError> {
        serde_json::from_str(text).map_err(|e| ProblemError::Document(e.to_string()))
    }
}

/// Named test instances.
pub mod builtin {
    use super::*;

    /// `P = R = I₂, q = s = 0, A = B = I₂, b = (1, 1)`.
    pub fn p1() -> (SeparableProblem, KktPoint) {
        make_quadratic_problem(
            Matrix::identity(2),
            vec![0.0; 2],
            Matrix::identity(2),
            vec![0.0; 2],
            Matrix::identity(2),
            Matrix::identity(2),
            vec![1.0, 1.0],
        )
        .expect("P1 is well posed")
    }

    /// `P = diag(1,2), R = I₂, q = (1,0), s = 0, A = I₂, B = [[1,1],[0,1]], b = (1,2)`.
    pub fn p2() -> (SeparableProblem, KktPoint) {
        make_quadratic_problem(
            Matrix::from_diagonal(&[1.0, 2.0]),
            vec![1.0, 0.0],
            Matrix::identity(2),
            vec![0.0; 2],
            Matrix::identity(2),
            Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]], 2).expect("static"),
            vec![1.0, 2.0],
        )
        .expect("P2 is well posed")
    }

    pub fn by_name(name: &str) -> Option<(SeparableProblem, KktPoint)> {
        match name {
            "p1" | "P1" => Some(p1()),
            "p2" | "P2" => Some(p2()),
            _ => None,
        }
    }
}
