//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! minimize    ½ x'Qx + q'x
//! subject to  Aeq x = beq
//!             lin_lower <= Ain x <= lin_upper
//!             var_lower <= x <= var_upper
//! ```
//!
//! Dual sign convention. The Lagrangian is
//!
//! ```text
//! L = ½ x'Qx + q'x + y'(Aeq x - beq)
//!     - mu_lo'(Ain x - lin_lower) + mu_up'(Ain x - lin_upper)
//!     - nu_lo'(x - var_lower)     + nu_up'(x - var_upper)
//! ```
//!
//! so that at an optimum `Qx + q + Aeq'y - Ain'mu_lo + Ain'mu_up - nu_lo + nu_up = 0`
//! with every inequality multiplier nonnegative. The equality multiplier `y`
//! is the negative sensitivity of the optimal value to `beq`.
//!
//! The core is the Goldfarb-Idnani dual active-set method on a positive
//! definite Hessian. Merely semidefinite problems are handled by proximal-point
//! iterations on `Q + rho I`, followed by an exact solve of the KKT system on
//! the final active set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_SHIFT: f64 = 1e-10;
const PRIMAL_TOL: f64 = 1e-9;
const PROX_TOL: f64 = 1e-11;
const MAX_PROX_ITERS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub duals_eq: DVector<f64>,
    pub duals_in_lower: DVector<f64>,
    pub duals_in_upper: DVector<f64>,
    pub duals_box_lower: DVector<f64>,
    pub duals_box_upper: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Active-set iterations summed over all proximal passes.
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("Q is not positive semidefinite")]
    NotConvex,
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("iteration limit reached")]
    MaxIterations { best: Box<QpSolution> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub q_matrix: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lin_lower: DVector<f64>,
    pub lin_upper: DVector<f64>,
    pub var_lower: DVector<f64>,
    pub var_upper: DVector<f64>,
}

impl QuadraticProgram {
    /// Unconstrained problem in `q.len()` variables.
    pub fn new(q_matrix: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q_matrix,
            q,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lin_lower: DVector::zeros(0),
            lin_upper: DVector::zeros(0),
            var_lower: DVector::from_element(n, f64::NEG_INFINITY),
            var_upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn with_inequalities(mut self, a_in: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.a_in = a_in;
        self.lin_lower = lower;
        self.lin_upper = upper;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.var_lower = lower;
        self.var_upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q_matrix * x)) + self.q.dot(x)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let bad = |what: &str| Err(QpError::Invalid(what.to_string()));
        if self.q_matrix.shape() != (n, n) {
            return bad("Q must be n x n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality system has inconsistent dimensions");
        }
        if self.a_in.ncols() != n
            || self.a_in.nrows() != self.lin_lower.len()
            || self.a_in.nrows() != self.lin_upper.len()
        {
            return bad("inequality system has inconsistent dimensions");
        }
        if self.var_lower.len() != n || self.var_upper.len() != n {
            return bad("bounds have inconsistent dimensions");
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !finite(self.q_matrix.as_slice())
            || !finite(self.q.as_slice())
            || !finite(self.a_eq.as_slice())
            || !finite(self.b_eq.as_slice())
            || !finite(self.a_in.as_slice())
        {
            return bad("non-finite problem data");
        }
        let no_nan = |m: &[f64]| m.iter().all(|v| !v.is_nan());
        if !no_nan(self.lin_lower.as_slice())
            || !no_nan(self.lin_upper.as_slice())
            || !no_nan(self.var_lower.as_slice())
            || !no_nan(self.var_upper.as_slice())
        {
            return bad("NaN bound");
        }
        let scale = 1.0 + self.q_matrix.amax();
        if (&self.q_matrix - self.q_matrix.transpose()).amax() > SYMMETRY_TOL * scale {
            return bad("Q is not symmetric");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    /// Largest negative part of an inequality multiplier.
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

fn slack_product(mult: f64, slack: f64) -> f64 {
    if mult == 0.0 {
        0.0
    } else {
        (mult * slack).abs()
    }
}

/// Maximum violations of the KKT conditions under the documented sign convention.
pub fn kkt_residuals(qp: &QuadraticProgram, sol: &QpSolution) -> KktResiduals {
    let x = &sol.x;
    let grad = &qp.q_matrix * x + &qp.q + qp.a_eq.transpose() * &sol.duals_eq
        - qp.a_in.transpose() * &sol.duals_in_lower
        + qp.a_in.transpose() * &sol.duals_in_upper
        - &sol.duals_box_lower
        + &sol.duals_box_upper;
    let stationarity = grad.amax();

    let ax_eq = &qp.a_eq * x;
    let ax_in = &qp.a_in * x;
    let mut primal: f64 = (&ax_eq - &qp.b_eq).amax();
    let mut complementarity: f64 = 0.0;
    let mut check = |value: f64, lower: f64, upper: f64, mu_lo: f64, mu_up: f64| {
        primal = primal.max(lower - value).max(value - upper);
        if lower.is_finite() {
            complementarity = complementarity.max(slack_product(mu_lo, value - lower));
        } else {
            complementarity = complementarity.max(mu_lo.abs());
        }
        if upper.is_finite() {
            complementarity = complementarity.max(slack_product(mu_up, upper - value));
        } else {
            complementarity = complementarity.max(mu_up.abs());
        }
    };
    for i in 0..ax_in.len() {
        check(
            ax_in[i],
            qp.lin_lower[i],
            qp.lin_upper[i],
            sol.duals_in_lower[i],
            sol.duals_in_upper[i],
        );
    }
    for j in 0..x.len() {
        check(
            x[j],
            qp.var_lower[j],
            qp.var_upper[j],
            sol.duals_box_lower[j],
            sol.duals_box_upper[j],
        );
    }
    let dual = sol
        .duals_in_lower
        .iter()
        .chain(sol.duals_in_upper.iter())
        .chain(sol.duals_box_lower.iter())
        .chain(sol.duals_box_upper.iter())
        .fold(0.0_f64, |acc, &m| acc.max(-m));
    KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        dual,
        complementarity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Eq(usize),
    InLower(usize),
    InUpper(usize),
    BoxLower(usize),
    BoxUpper(usize),
}

/// One constraint `normal'x >= rhs` (or `=` for equalities), with unit normal.
#[derive(Debug, Clone)]
struct Row {
    normal: DVector<f64>,
    rhs: f64,
    /// Multiplier of the normalized row times `scale` gives the reported one.
    scale: f64,
    origin: Origin,
}

impl Row {
    fn is_eq(&self) -> bool {
        matches!(self.origin, Origin::Eq(_))
    }
}

fn build_rows(qp: &QuadraticProgram) -> Result<Vec<Row>, QpError> {
    let n = qp.dim();
    let mut rows = Vec::new();
    let mut push = |normal: DVector<f64>, rhs: f64, origin: Origin| -> Result<(), QpError> {
        let norm = normal.norm();
        if norm == 0.0 {
            let ok = match origin {
                Origin::Eq(_) => rhs.abs() <= PRIMAL_TOL,
                _ => rhs <= PRIMAL_TOL,
            };
            if !ok {
                return Err(QpError::Infeasible(format!(
                    "empty constraint row {origin:?} cannot hold"
                )));
            }
            return Ok(());
        }
        rows.push(Row {
            normal: normal / norm,
            rhs: rhs / norm,
            scale: 1.0 / norm,
            origin,
        });
        Ok(())
    };
    for i in 0..qp.a_eq.nrows() {
        push(qp.a_eq.row(i).transpose(), qp.b_eq[i], Origin::Eq(i))?;
    }
    for i in 0..qp.a_in.nrows() {
        let (lo, up) = (qp.lin_lower[i], qp.lin_upper[i]);
        if lo > up {
            return Err(QpError::Infeasible(format!(
                "inequality row {i} has lower bound above upper bound"
            )));
        }
        let a = qp.a_in.row(i).transpose();
        if lo.is_finite() {
            push(a.clone(), lo, Origin::InLower(i))?;
        }
        if up.is_finite() {
            push(-a, -up, Origin::InUpper(i))?;
        }
    }
    for j in 0..n {
        let (lo, up) = (qp.var_lower[j], qp.var_upper[j]);
        if lo > up {
            return Err(QpError::Infeasible(format!(
                "variable {j} has lower bound above upper bound"
            )));
        }
        let e = DVector::from_fn(n, |k, _| if k == j { 1.0 } else { 0.0 });
        if lo.is_finite() {
            push(e.clone(), lo, Origin::BoxLower(j))?;
        }
        if up.is_finite() {
            push(-e, -up, Origin::BoxUpper(j))?;
        }
    }
    Ok(rows)
}

struct DualResult {
    x: DVector<f64>,
    /// `(row index, multiplier of the normalized row, orientation)`; equality
    /// rows may be entered with flipped orientation.
    active: Vec<(usize, f64, f64)>,
    iterations: usize,
}

enum DualFailure {
    Infeasible(String),
    MaxIterations(DualResult),
}

/// Row data premultiplied by the inverse Hessian, shared by all passes that
/// use the same `G`.
struct Factored {
    g_inv: DMatrix<f64>,
    /// Column `r` is `G^-1 n_r`.
    images: DMatrix<f64>,
    /// `n_r' G^-1 n_s`.
    gram: DMatrix<f64>,
    /// Row `r` is `n_r'`.
    normals: DMatrix<f64>,
}

impl Factored {
    fn new(g_inv: DMatrix<f64>, rows: &[Row]) -> Self {
        let n = g_inv.nrows();
        let normals = DMatrix::from_fn(rows.len(), n, |r, j| rows[r].normal[j]);
        let images = &g_inv * normals.transpose();
        let gram = &normals * &images;
        Self {
            g_inv,
            images,
            gram,
            normals,
        }
    }
}

/// Goldfarb-Idnani on `min ½x'Gx + a'x` for positive definite `G`.
fn dual_active_set(f: &Factored, a: &DVector<f64>, rows: &[Row]) -> Result<DualResult, DualFailure> {
    let n = a.len();
    let max_iters = 50 * (n + rows.len()) + 100;
    let free = -(&f.g_inv * a);
    let mut x = free.clone();
    // active rows with multiplier and orientation (+1, or -1 for flipped equalities)
    let mut active: Vec<(usize, f64, f64)> = Vec::new();
    let mut is_active = vec![false; rows.len()];
    let mut iterations = 0;
    let mut pending_eq: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].is_eq()).collect();
    pending_eq.reverse();

    let primal = |active: &[(usize, f64, f64)]| -> DVector<f64> {
        let mut x = free.clone();
        for &(r, m, o) in active {
            x.axpy(m * o, &f.images.column(r), 1.0);
        }
        x
    };

    loop {
        let (p, orient) = if let Some(r) = pending_eq.pop() {
            // satisfied equalities are activated too, so later steps keep them
            let s = rows[r].normal.dot(&x) - rows[r].rhs;
            (r, if s > 0.0 { -1.0 } else { 1.0 })
        } else {
            let slack = &f.normals * &x;
            let mut worst = None;
            let mut worst_violation = 0.0;
            for (r, row) in rows.iter().enumerate() {
                if row.is_eq() || is_active[r] {
                    continue;
                }
                let s = slack[r] - row.rhs;
                let tol = 0.1 * PRIMAL_TOL * (1.0 + row.rhs.abs());
                if s < -tol && -s > worst_violation {
                    worst_violation = -s;
                    worst = Some(r);
                }
            }
            match worst {
                Some(r) => (r, 1.0),
                None => return Ok(DualResult { x, active, iterations }),
            }
        };
        let np = &rows[p].normal * orient;
        let hnp = f.images.column(p) * orient;
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iters {
                return Err(DualFailure::MaxIterations(DualResult { x, active, iterations }));
            }
            let s = np.dot(&x) - rows[p].rhs * orient;
            let k = active.len();
            let (z, rdir) = if k == 0 {
                (hnp.clone(), DVector::zeros(0))
            } else {
                let s_mat = DMatrix::from_fn(k, k, |i, j| {
                    let (ri, _, oi) = active[i];
                    let (rj, _, oj) = active[j];
                    f.gram[(ri, rj)] * oi * oj
                });
                let rhs = DVector::from_fn(k, |i, _| f.gram[(active[i].0, p)] * active[i].2 * orient);
                let r = match s_mat.lu().solve(&rhs) {
                    Some(r) => r,
                    None => return Err(DualFailure::Infeasible("singular active set".into())),
                };
                let mut z = hnp.clone();
                for (c, &(row, _, o)) in active.iter().enumerate() {
                    z.axpy(-r[c] * o, &f.images.column(row), 1.0);
                }
                (z, r)
            };
            // dual step limit over active inequalities
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (c, &(r, m, _)) in active.iter().enumerate() {
                if rows[r].is_eq() {
                    continue;
                }
                if rdir[c] > 1e-14 {
                    let ratio = m / rdir[c];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(c);
                    }
                }
            }
            let curvature = z.dot(&np);
            let zero_step = z.amax() <= 1e-12 * (1.0 + hnp.amax()) || curvature <= 1e-14 * hnp.dot(&np).max(1e-300);
            let t2 = if zero_step { f64::INFINITY } else { -s / curvature };
            if zero_step && t1.is_infinite() {
                if rows[p].is_eq() && s.abs() <= 1e3 * PRIMAL_TOL * (1.0 + rows[p].rhs.abs()) {
                    // redundant equality
                    break;
                }
                return Err(DualFailure::Infeasible(format!(
                    "constraint {:?} cannot be satisfied together with the active set",
                    rows[p].origin
                )));
            }
            let t = t1.min(t2);
            for (c, entry) in active.iter_mut().enumerate() {
                entry.1 -= t * rdir[c];
            }
            u_p += t;
            if t2 <= t1 {
                active.push((p, u_p, orient));
                is_active[p] = true;
                x = primal(&active);
                break;
            }
            let c = drop.expect("finite partial step has a blocking constraint");
            is_active[active[c].0] = false;
            active.remove(c);
            let mut with_p = active.clone();
            with_p.push((p, u_p, orient));
            x = primal(&with_p);
        }
    }
}

fn factor_inverse(g: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::<f64, Dyn>::new(g.clone()).map(|c| c.inverse())
}

/// Solves the equality-constrained KKT system on the given active set with the
/// original Hessian. Returns `None` if the system is singular.
fn polish(
    qp_q: &DMatrix<f64>,
    q: &DVector<f64>,
    rows: &[Row],
    active: &[(usize, f64, f64)],
) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = q.len();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(qp_q);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-q));
    for (c, &(r, _, o)) in active.iter().enumerate() {
        let col = &rows[r].normal * o;
        kkt.view_mut((0, n + c), (n, 1)).copy_from(&(-&col));
        kkt.view_mut((n + c, 0), (1, n)).copy_from(&col.transpose());
        rhs[n + c] = rows[r].rhs * o;
    }
    let sol = kkt.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mult = sol.rows(n, k).iter().copied().collect();
    Some((x, mult))
}

fn assemble(
    qp: &QuadraticProgram,
    rows: &[Row],
    x: DVector<f64>,
    active: &[(usize, f64, f64)],
    status: QpStatus,
    iterations: usize,
) -> QpSolution {
    let n = qp.dim();
    let mut sol = QpSolution {
        objective: qp.objective(&x),
        x,
        duals_eq: DVector::zeros(qp.a_eq.nrows()),
        duals_in_lower: DVector::zeros(qp.a_in.nrows()),
        duals_in_upper: DVector::zeros(qp.a_in.nrows()),
        duals_box_lower: DVector::zeros(n),
        duals_box_upper: DVector::zeros(n),
        status,
        iterations,
    };
    for &(r, m, o) in active {
        let row = &rows[r];
        let value = m * row.scale;
        match row.origin {
            Origin::Eq(i) => sol.duals_eq[i] = -o * value,
            Origin::InLower(i) => sol.duals_in_lower[i] = value,
            Origin::InUpper(i) => sol.duals_in_upper[i] = value,
            Origin::BoxLower(j) => sol.duals_box_lower[j] = value,
            Origin::BoxUpper(j) => sol.duals_box_upper[j] = value,
        }
    }
    sol
}

fn feasible(rows: &[Row], x: &DVector<f64>) -> bool {
    rows.iter().all(|row| {
        let s = row.normal.dot(x) - row.rhs;
        let tol = PRIMAL_TOL * (1.0 + row.rhs.abs());
        if row.is_eq() {
            s.abs() <= tol
        } else {
            s >= -tol
        }
    })
}

/// Solves a convex QP. Deterministic for identical input.
pub fn solve(qp: &QuadraticProgram) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let n = qp.dim();
    let q_sym = (&qp.q_matrix + qp.q_matrix.transpose()) * 0.5;
    let qmax = q_sym.amax();
    let shifted = &q_sym + DMatrix::identity(n, n) * (PSD_SHIFT * (1.0 + qmax));
    if n > 0 && Cholesky::new(shifted).is_none() {
        return Err(QpError::NotConvex);
    }
    let rows = build_rows(qp)?;
    if n == 0 {
        return Ok(assemble(qp, &rows, DVector::zeros(0), &[], QpStatus::Optimal, 0));
    }

    // strictly convex: one pass
    let strictly_convex = Cholesky::new(q_sym.clone())
        .map(|c| {
            let l = c.l();
            (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min) > 1e-8 * qmax
        })
        .unwrap_or(false);
    if strictly_convex {
        if let Some(g_inv) = factor_inverse(&q_sym) {
            let f = Factored::new(g_inv, &rows);
            return match dual_active_set(&f, &qp.q, &rows) {
                Ok(res) => Ok(finish(
                    qp,
                    &q_sym,
                    &rows,
                    res.x,
                    &res.active,
                    QpStatus::Optimal,
                    res.iterations,
                )),
                Err(DualFailure::Infeasible(msg)) => Err(QpError::Infeasible(msg)),
                Err(DualFailure::MaxIterations(res)) => Err(QpError::MaxIterations {
                    best: Box::new(assemble(
                        qp,
                        &rows,
                        res.x,
                        &res.active,
                        QpStatus::MaxIterations,
                        res.iterations,
                    )),
                }),
            };
        }
    }

    // proximal-point iterations on Q + rho I
    let rho = if qmax > 0.0 { 1e-3 * qmax } else { 1e-3 };
    let g = &q_sym + DMatrix::identity(n, n) * rho;
    let f = Factored::new(factor_inverse(&g).ok_or(QpError::NotConvex)?, &rows);
    let mut center = DVector::zeros(n);
    let mut total_iters = 0;
    let mut last: Option<DualResult> = None;
    for _ in 0..MAX_PROX_ITERS {
        let a = &qp.q - &center * rho;
        let res = match dual_active_set(&f, &a, &rows) {
            Ok(res) => res,
            Err(DualFailure::Infeasible(msg)) => return Err(QpError::Infeasible(msg)),
            Err(DualFailure::MaxIterations(res)) => {
                return Err(QpError::MaxIterations {
                    best: Box::new(assemble(
                        qp,
                        &rows,
                        res.x,
                        &res.active,
                        QpStatus::MaxIterations,
                        total_iters + res.iterations,
                    )),
                })
            }
        };
        total_iters += res.iterations;
        let step = (&res.x - &center).amax();
        center = res.x.clone();
        // an exact solve on the current active set ends the loop early
        if let Some((x, mult)) = polish(&q_sym, &qp.q, &rows, &res.active) {
            let dual_ok = res
                .active
                .iter()
                .zip(&mult)
                .all(|(&(r, _, _), &m)| rows[r].is_eq() || m >= -1e-12 * (1.0 + m.abs()));
            if dual_ok && feasible(&rows, &x) {
                let active: Vec<_> = res.active.iter().zip(&mult).map(|(&(r, _, o), &m)| (r, m, o)).collect();
                let sol = assemble(qp, &rows, x, &active, QpStatus::Optimal, total_iters);
                let kkt = kkt_residuals(qp, &sol);
                if kkt.stationarity <= 1e-9 * (1.0 + qp.q.amax()) {
                    return Ok(sol);
                }
            }
        }
        let done = step <= PROX_TOL * (1.0 + res.x.amax());
        last = Some(res);
        if done {
            break;
        }
    }
    let res = last.expect("at least one proximal pass");
    let sol = assemble(qp, &rows, res.x, &res.active, QpStatus::Optimal, total_iters);
    let kkt = kkt_residuals(qp, &sol);
    if kkt.stationarity <= 1e-6 * (1.0 + qp.q.amax()) {
        Ok(sol)
    } else {
        Err(QpError::MaxIterations {
            best: Box::new(QpSolution {
                status: QpStatus::MaxIterations,
                ..sol
            }),
        })
    }
}

fn finish(
    qp: &QuadraticProgram,
    q_sym: &DMatrix<f64>,
    rows: &[Row],
    x: DVector<f64>,
    active: &[(usize, f64, f64)],
    status: QpStatus,
    iterations: usize,
) -> QpSolution {
    if let Some((px, mult)) = polish(q_sym, &qp.q, rows, active) {
        if feasible(rows, &px) {
            let act: Vec<_> = active.iter().zip(&mult).map(|(&(r, _, o), &m)| (r, m, o)).collect();
            let polished = assemble(qp, rows, px, &act, status, iterations);
            let raw = assemble(qp, rows, x.clone(), active, status, iterations);
            if kkt_residuals(qp, &polished).max() <= kkt_residuals(qp, &raw).max() {
                return polished;
            }
            return raw;
        }
    }
    assemble(qp, rows, x, active, status, iterations)
}
