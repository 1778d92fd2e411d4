//! Minimization of generation cost plus piecewise-quadratic cycle cost.
//!
//! The cycle cost `C(u) = (w/2) |N(u) u|^2` is convex but only piecewise
//! smooth: `N(u)` switches when the SoC trajectory changes its cycle
//! structure, and at ties several matrices describe the same point.
//!
//! The solver is a proximal bundle method. Every evaluated point contributes
//! the linearizations of all pieces active there; by convexity these are
//! global minorants of `C`. Each subproblem minimizes the generation cost plus
//! the cutting-plane model of `C` plus a proximal term around the current
//! center, with the metric taken from the local piece Hessians. In a smooth
//! region this is a Newton step on the exact cost. A trial point that achieves
//! a fraction of the predicted decrease becomes the new center; otherwise its
//! cuts refine the model.
//!
//! At termination the subgradient of the final model is projected onto the
//! pieces active at the solution, which certifies stationarity.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use super::{constraint_qp, unpack, Constraints, DispatchError, DispatchSolution, Instance, Layout};
use crate::qp::{self, QpSolution, QuadraticProgram};
use crate::rainflow;
use crate::storage;

const MAX_ITERATIONS: usize = 500;
const MAX_CUTS: usize = 64;
/// Fraction of the predicted decrease a serious step has to achieve.
const DESCENT_FRACTION: f64 = 0.1;
/// SoC gaps at which nearby ties are sampled for extra cuts.
const SNAP_LEVELS: [f64; 2] = [1e-5, 1e-3];
const MAX_BACKTRACK: usize = 8;
const DECREASE_TOL: f64 = 1e-11;
const STEP_TOL: f64 = 1e-11;
/// Relative ridge added to the proximal metric.
const RIDGE: f64 = 1e-8;
const CERTIFICATE_TOL: f64 = 1e-5;
/// SoC gap below which nodes count as tied when certifying the solution.
const CERTIFICATE_SNAP: [f64; 5] = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3];
const SUBGRADIENT_ITERS: usize = 5000;
const SUBGRADIENT_WINDOW: usize = 50;
const SUBGRADIENT_TOL: f64 = 1e-7;

/// Cost attached to a storage unit's rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StorageTerm {
    /// No cost.
    Free,
    /// `(w/2) nu'nu` with `nu` the Rainflow depths.
    Cycle(f64),
}

#[derive(Debug, Clone)]
pub struct PiecewiseProblem<'a> {
    pub instance: &'a Instance,
    pub gen_terms: Vec<super::GenTerm>,
    pub storage_terms: Vec<StorageTerm>,
    pub constraints: Constraints,
}

/// Convex weights over the rate-to-depth matrices active at the solution.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceCertificate {
    pub matrices: Vec<DMatrix<f64>>,
    pub gamma: Vec<f64>,
    /// `|sum_k gamma_k grad_k - g|_inf` for the model subgradient `g`.
    pub residual: f64,
    pub enumeration_complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseSolution {
    pub dispatch: DispatchSolution,
    pub used_fallback: bool,
}

/// `C(v) >= offset + grad'v`.
#[derive(Debug, Clone)]
struct Cut {
    grad: DVector<f64>,
    offset: f64,
    /// Iteration at which the cut was last active.
    used: usize,
}

struct CycleUnit {
    storage: usize,
    weight: f64,
    capacity: f64,
    x0: f64,
    cuts: Vec<Cut>,
    /// Convex combination of the cuts active in the last subproblem. It
    /// replaces the dropped cuts when the bundle is compressed.
    aggregate: Option<Cut>,
    metric: DMatrix<f64>,
}

impl CycleUnit {
    fn cost(&self, u: &[f64]) -> f64 {
        storage::degradation_cost_unchecked(u, self.capacity, self.x0, self.weight)
    }

    fn path(&self, u: &[f64]) -> Vec<f64> {
        storage::soc_path(u, self.capacity, self.x0)
    }

    fn hessian(&self, n: &DMatrix<f64>) -> DMatrix<f64> {
        n.transpose() * n * self.weight
    }

    /// Adds the linearizations of the pieces active at `u`.
    /// Rates whose SoC path is the path of `u` with nodes closer than `tol`
    /// merged.
    fn snapped(&self, u: &DVector<f64>, tol: f64) -> DVector<f64> {
        let path = rainflow::snap_near_ties(&self.path(u.as_slice()), tol);
        DVector::from_fn(u.len(), |t, _| self.capacity * (path[t] - path[t + 1]))
    }

    /// Adds the linearizations of the pieces active at `u` and at nearby
    /// points where close SoC nodes tie.
    fn add_cuts(&mut self, u: &DVector<f64>, iteration: usize) {
        self.add_cuts_at(u, iteration);
        for tol in SNAP_LEVELS {
            let v = self.snapped(u, tol);
            if v != *u {
                self.add_cuts_at(&v, iteration);
            }
        }
        if self.cuts.len() > MAX_CUTS {
            self.cuts.sort_by_key(|c| std::cmp::Reverse(c.used));
            self.cuts.truncate(MAX_CUTS - 1);
            if let Some(mut agg) = self.aggregate.take() {
                agg.used = iteration;
                self.cuts.push(agg);
            }
        }
    }

    fn add_cuts_at(&mut self, u: &DVector<f64>, iteration: usize) {
        let op = rainflow::operator_for_path(&self.path(u.as_slice()), self.capacity);
        let cost = self.cost(u.as_slice());
        for n in &op.matrices {
            let grad = self.hessian(n) * u;
            let offset = cost - grad.dot(u);
            let scale = 1.0 + grad.amax();
            let duplicate = self.cuts.iter().any(|c| {
                (&c.grad - &grad).amax() <= 1e-12 * scale && (c.offset - offset).abs() <= 1e-12 * (1.0 + cost)
            });
            if !duplicate {
                self.cuts.push(Cut {
                    grad,
                    offset,
                    used: iteration,
                });
            }
        }
    }

    /// Proximal metric at `u`: the mean Hessian of the active pieces.
    fn recenter(&mut self, u: &DVector<f64>) {
        let path = rainflow::snap_near_ties(&self.path(u.as_slice()), SNAP_LEVELS[0]);
        let op = rainflow::operator_for_path(&path, self.capacity);
        let t = u.len();
        let mut h = DMatrix::zeros(t, t);
        for n in &op.matrices {
            h += self.hessian(n);
        }
        h /= op.matrices.len().max(1) as f64;
        let ridge = RIDGE * self.weight / (self.capacity * self.capacity);
        for k in 0..t {
            h[(k, k)] += ridge;
        }
        self.metric = h;
    }
}

struct Solver<'a> {
    problem: &'a PiecewiseProblem<'a>,
    layout: Layout,
    base: QuadraticProgram,
    units: Vec<CycleUnit>,
}

struct ModelStep {
    x: DVector<f64>,
    sol: QpSolution,
    /// Generation cost plus cutting-plane model at the step.
    model: f64,
    /// Subgradient of the model at the step, per unit.
    subgradients: Vec<DVector<f64>>,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a PiecewiseProblem<'a>) -> Self {
        let inst = problem.instance;
        let layout = Layout::of(inst);
        let units: Vec<CycleUnit> = problem
            .storage_terms
            .iter()
            .enumerate()
            .filter_map(|(i, term)| match *term {
                StorageTerm::Cycle(w) if w > 0.0 => Some(CycleUnit {
                    storage: i,
                    weight: w,
                    capacity: inst.storages[i].capacity_mwh,
                    x0: inst.storages[i].x0,
                    cuts: Vec::new(),
                    aggregate: None,
                    metric: DMatrix::zeros(layout.horizon, layout.horizon),
                }),
                _ => None,
            })
            .collect();
        let fixed = vec![false; layout.storages];
        let mut base = constraint_qp(inst, &layout, problem.constraints, units.len(), &fixed);
        for (j, term) in problem.gen_terms.iter().enumerate() {
            for t in 0..layout.horizon {
                let k = layout.gen(j) + t;
                base.q_matrix[(k, k)] = term.quad;
                base.q[k] = term.lin;
            }
        }
        Self {
            problem,
            layout,
            base,
            units,
        }
    }

    fn rates(&self, x: &DVector<f64>, i: usize) -> DVector<f64> {
        x.rows(self.layout.storage(i), self.layout.horizon).into_owned()
    }

    fn generation_cost(&self, x: &DVector<f64>) -> f64 {
        self.problem
            .gen_terms
            .iter()
            .enumerate()
            .map(|(j, term)| {
                let g = x.rows(self.layout.gen(j), self.layout.horizon);
                0.5 * term.quad * g.norm_squared() + term.lin * g.sum()
            })
            .sum()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let cycle: f64 = self
            .units
            .iter()
            .map(|u| u.cost(self.rates(x, u.storage).as_slice()))
            .sum();
        self.generation_cost(x) + cycle
    }

    fn add_cuts(&mut self, x: &DVector<f64>, iteration: usize) {
        for k in 0..self.units.len() {
            let u = self.rates(x, self.units[k].storage);
            self.units[k].add_cuts(&u, iteration);
        }
    }

    fn recenter(&mut self, x: &DVector<f64>) {
        for k in 0..self.units.len() {
            let u = self.rates(x, self.units[k].storage);
            self.units[k].recenter(&u);
        }
    }

    /// Solves the proximal subproblem around `center`.
    fn model_step(&mut self, center: &DVector<f64>, iteration: usize) -> Result<ModelStep, DispatchError> {
        let base_vars = self.layout.base_vars();
        let t_len = self.layout.horizon;
        let n = self.base.dim();
        let mut qp = self.base.clone();
        let cut_count: usize = self.units.iter().map(|u| u.cuts.len()).sum();
        let old_rows = qp.a_in.nrows();
        let mut a_in = DMatrix::zeros(old_rows + cut_count, n);
        a_in.rows_mut(0, old_rows).copy_from(&qp.a_in);
        let mut lo = DVector::from_element(old_rows + cut_count, f64::NEG_INFINITY);
        lo.rows_mut(0, old_rows).copy_from(&qp.lin_lower);
        let mut up = DVector::from_element(old_rows + cut_count, f64::INFINITY);
        up.rows_mut(0, old_rows).copy_from(&qp.lin_upper);
        let mut row = old_rows;
        for (k, unit) in self.units.iter().enumerate() {
            let col = self.layout.storage(unit.storage);
            let uc = self.rates(center, unit.storage);
            qp.q_matrix.view_mut((col, col), (t_len, t_len)).copy_from(&unit.metric);
            qp.q.rows_mut(col, t_len).copy_from(&-(&unit.metric * &uc));
            let t_var = base_vars + k;
            qp.q[t_var] = 1.0;
            for cut in &unit.cuts {
                a_in[(row, t_var)] = 1.0;
                for s in 0..t_len {
                    a_in[(row, col + s)] = -cut.grad[s];
                }
                lo[row] = cut.offset;
                row += 1;
            }
        }
        qp.a_in = a_in;
        qp.lin_lower = lo;
        qp.lin_upper = up;
        let sol = qp::solve(&qp)?;
        let x = sol.x.rows(0, base_vars).into_owned();
        let mut model = self.generation_cost(&x);
        let mut subgradients = Vec::with_capacity(self.units.len());
        let mut row = old_rows;
        for k in 0..self.units.len() {
            let u = self.rates(&x, self.units[k].storage);
            let uc = self.rates(center, self.units[k].storage);
            let unit = &mut self.units[k];
            let mut sub = &unit.metric * (&u - &uc);
            let mut value = f64::NEG_INFINITY;
            let mut agg = Cut {
                grad: DVector::zeros(t_len),
                offset: 0.0,
                used: iteration,
            };
            for cut in unit.cuts.iter_mut() {
                value = value.max(cut.offset + cut.grad.dot(&u));
                let mu = sol.duals_in_lower[row];
                if mu > 0.0 {
                    sub.axpy(mu, &cut.grad, 1.0);
                    agg.grad.axpy(mu, &cut.grad, 1.0);
                    agg.offset += mu * cut.offset;
                    cut.used = iteration;
                }
                row += 1;
            }
            unit.aggregate = Some(agg);
            model += value;
            subgradients.push(sub);
        }
        Ok(ModelStep {
            x,
            sol,
            model,
            subgradients,
        })
    }

    /// Shortened steps towards a rejected trial point, first one with
    /// sufficient decrease.
    fn backtrack(
        &self,
        center: &DVector<f64>,
        trial: &DVector<f64>,
        f: f64,
        decrease: f64,
    ) -> Option<(DVector<f64>, f64)> {
        let direction = trial - center;
        let mut alpha = 1.0;
        for _ in 0..MAX_BACKTRACK {
            alpha *= 0.5;
            let x = center + &direction * alpha;
            let fx = self.objective(&x);
            if fx <= f - DESCENT_FRACTION * alpha * decrease {
                return Some((x, fx));
            }
        }
        None
    }

    /// Matrices active at `u`, including the near ties merged at every
    /// certificate snap level.
    fn active_matrices(&self, unit: &CycleUnit, u: &DVector<f64>) -> (Vec<DMatrix<f64>>, bool) {
        let path = unit.path(u.as_slice());
        let op = rainflow::operator_for_path(&path, unit.capacity);
        let cost = unit.cost(u.as_slice());
        let tol = 1e-7 * (1.0 + cost.abs());
        let mut complete = op.enumeration_complete;
        let mut out = op.matrices;
        for snap in CERTIFICATE_SNAP {
            let snapped = rainflow::operator_for_path(&rainflow::snap_near_ties(&path, snap), unit.capacity);
            complete &= snapped.enumeration_complete;
            for n in snapped.matrices {
                let value = 0.5 * unit.weight * (&n * u).norm_squared();
                if !out.contains(&n) && (value - cost).abs() <= tol {
                    out.push(n);
                }
            }
        }
        (out, complete)
    }

    fn certificate(&self, unit: &CycleUnit, u: &DVector<f64>, target: &DVector<f64>) -> PieceCertificate {
        let (matrices, complete) = self.active_matrices(unit, u);
        let m = matrices.len();
        let mut grads = DMatrix::zeros(u.len(), m);
        for (c, n) in matrices.iter().enumerate() {
            grads.set_column(c, &(unit.hessian(n) * u));
        }
        let gram = grads.transpose() * &grads;
        let lin = -(grads.transpose() * target);
        let ls = QuadraticProgram::new(gram, lin)
            .with_equalities(DMatrix::from_element(1, m, 1.0), DVector::from_element(1, 1.0))
            .with_bounds(DVector::zeros(m), DVector::from_element(m, f64::INFINITY));
        let gamma = match qp::solve(&ls) {
            Ok(sol) => sol.x,
            Err(_) => DVector::from_fn(m, |k, _| if k == 0 { 1.0 } else { 0.0 }),
        };
        let residual = (&grads * &gamma - target).amax();
        PieceCertificate {
            matrices,
            gamma: gamma.iter().copied().collect(),
            residual,
            enumeration_complete: complete,
        }
    }

    fn finish(&self, x: &DVector<f64>, step: &ModelStep, iterations: usize, converged: bool) -> DispatchSolution {
        let inst = self.problem.instance;
        let mut out = unpack(
            inst,
            &self.layout,
            self.problem.constraints,
            &self.problem.gen_terms,
            x,
            &step.sol,
        );
        out.objective = self.objective(x);
        out.iterations = iterations;
        for (k, unit) in self.units.iter().enumerate() {
            let u = self.rates(x, unit.storage);
            let cert = self.certificate(unit, &u, &step.subgradients[k]);
            let scale = 1.0 + step.subgradients[k].amax();
            if cert.residual > CERTIFICATE_TOL * scale {
                if cert.enumeration_complete {
                    warn!(
                        "storage {}: stationarity certificate residual {:e}",
                        unit.storage, cert.residual
                    );
                } else {
                    debug!(
                        "storage {}: partial enumeration, certificate residual {:e}",
                        unit.storage, cert.residual
                    );
                }
            }
            out.certificates[unit.storage] = Some(cert);
        }
        out.converged = converged;
        out
    }

    fn project(&self, y: &DVector<f64>) -> Result<DVector<f64>, DispatchError> {
        let base_vars = self.layout.base_vars();
        let keep = |m: &DMatrix<f64>| m.columns(0, base_vars).into_owned();
        let qp = QuadraticProgram::new(DMatrix::identity(base_vars, base_vars), -y)
            .with_equalities(keep(&self.base.a_eq), self.base.b_eq.clone())
            .with_inequalities(
                keep(&self.base.a_in),
                self.base.lin_lower.clone(),
                self.base.lin_upper.clone(),
            )
            .with_bounds(
                self.base.var_lower.rows(0, base_vars).into_owned(),
                self.base.var_upper.rows(0, base_vars).into_owned(),
            );
        Ok(qp::solve(&qp)?.x)
    }

    fn subgradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        for (j, term) in self.problem.gen_terms.iter().enumerate() {
            let col = self.layout.gen(j);
            for t in 0..self.layout.horizon {
                g[col + t] = term.quad * x[col + t] + term.lin;
            }
        }
        for unit in &self.units {
            let u = self.rates(x, unit.storage);
            let n = rainflow::canonical_matrix(&unit.path(u.as_slice()), unit.capacity);
            let grad = n.transpose() * (&n * &u) * unit.weight;
            g.rows_mut(self.layout.storage(unit.storage), self.layout.horizon)
                .copy_from(&grad);
        }
        g
    }

    fn depths(&self, x: &DVector<f64>) -> Vec<f64> {
        self.units
            .iter()
            .flat_map(|unit| rainflow::depths_of_path(&unit.path(self.rates(x, unit.storage).as_slice())))
            .collect()
    }

    /// Projected subgradient descent from `x`. Returns the best point and
    /// whether the depth vectors settled.
    fn subgradient_descent(&self, x: DVector<f64>) -> Result<(DVector<f64>, bool), DispatchError> {
        let max_w = self
            .units
            .iter()
            .map(|u| u.weight / (u.capacity * u.capacity))
            .fold(0.0, f64::max);
        let max_c = self.problem.gen_terms.iter().map(|g| g.quad).fold(0.0, f64::max);
        let eta0 = 1.0 / (max_w + max_c).max(f64::MIN_POSITIVE);
        let mut best = (self.objective(&x), x.clone());
        let mut current = x;
        let mut history: Vec<Vec<f64>> = vec![self.depths(&current)];
        for k in 1..=SUBGRADIENT_ITERS {
            let step = eta0 / (k as f64).sqrt();
            let y = &current - self.subgradient(&current) * step;
            current = self.project(&y)?;
            let f = self.objective(&current);
            if f < best.0 {
                best = (f, current.clone());
            }
            history.push(self.depths(&current));
            if k >= SUBGRADIENT_WINDOW {
                let old = &history[k - SUBGRADIENT_WINDOW];
                let drift = old
                    .iter()
                    .zip(&history[k])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if drift <= SUBGRADIENT_TOL {
                    return Ok((best.1, true));
                }
            }
        }
        Ok((best.1, false))
    }
}

/// Minimizes generation cost plus the storage terms of `problem`.
///
/// `start` optionally gives initial storage rates (one vector per storage);
/// they only seed the first model and need not be feasible.
pub fn minimize_piecewise(
    problem: &PiecewiseProblem<'_>,
    start: Option<&[Vec<f64>]>,
) -> Result<PiecewiseSolution, DispatchError> {
    let inst = problem.instance;
    if problem.gen_terms.len() != inst.generators.len() || problem.storage_terms.len() != inst.storages.len() {
        return Err(DispatchError::InvalidInstance(
            "cost terms do not match the participants".into(),
        ));
    }
    let mut solver = Solver::new(problem);
    let layout = solver.layout.clone();
    let mut center = DVector::zeros(layout.base_vars());
    if let Some(start) = start {
        if start.len() != layout.storages || start.iter().any(|s| s.len() != layout.horizon) {
            return Err(DispatchError::InvalidInstance("start point has the wrong shape".into()));
        }
        for (i, s) in start.iter().enumerate() {
            center.rows_mut(layout.storage(i), layout.horizon).copy_from_slice(s);
        }
    }
    solver.add_cuts(&center, 0);
    solver.recenter(&center);
    let mut step = solver.model_step(&center, 0)?;
    if solver.units.is_empty() {
        let x = step.x.clone();
        let out = solver.finish(&x, &step, 1, true);
        return Ok(PiecewiseSolution {
            dispatch: out,
            used_fallback: false,
        });
    }

    // the first trial point is feasible while the start need not be
    center = step.x.clone();
    let mut f = solver.objective(&center);
    solver.add_cuts(&center, 1);
    solver.recenter(&center);
    let mut converged = false;
    let mut iterations = 1;
    let mut null_steps = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        step = solver.model_step(&center, iterations)?;
        let decrease = f - step.model;
        let moved = (&step.x - &center).amax();
        if decrease <= DECREASE_TOL * (1.0 + f.abs()) || moved <= STEP_TOL * (1.0 + center.amax()) {
            converged = true;
            break;
        }
        let trial = solver.objective(&step.x);
        solver.add_cuts(&step.x, iterations);
        if trial <= f - DESCENT_FRACTION * decrease {
            center = step.x.clone();
            f = trial;
            solver.recenter(&center);
        } else if let Some((x, fx)) = solver.backtrack(&center, &step.x, f, decrease) {
            solver.add_cuts(&x, iterations);
            center = x;
            f = fx;
            solver.recenter(&center);
        } else {
            null_steps += 1;
        }
    }
    debug!("bundle method: {iterations} iterations, {null_steps} null steps");

    if converged {
        let x = if solver.objective(&step.x) <= f {
            step.x.clone()
        } else {
            center
        };
        let out = solver.finish(&x, &step, iterations, true);
        return Ok(PiecewiseSolution {
            dispatch: out,
            used_fallback: false,
        });
    }

    warn!("bundle method stalled after {iterations} iterations; switching to subgradient descent");
    let (best, settled) = solver.subgradient_descent(center.clone())?;
    let best = if solver.objective(&best) < f { best } else { center };
    solver.add_cuts(&best, iterations + 1);
    solver.recenter(&best);
    let polish = solver.model_step(&best, iterations + 1)?;
    let stationary = (&polish.x - &best).amax() <= 1e-6 * (1.0 + best.amax());
    let final_x = if solver.objective(&polish.x) <= solver.objective(&best) {
        polish.x.clone()
    } else {
        best
    };
    let out = solver.finish(&final_x, &polish, iterations + SUBGRADIENT_ITERS, settled || stationary);
    Ok(PiecewiseSolution {
        dispatch: out,
        used_fallback: true,
    })
}
