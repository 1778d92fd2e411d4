//! Competitive equilibria of the two market designs and the checks around
//! them: the closed-form prosumer equilibrium, the social-alignment test,
//! truthful bids, participant profits and best-response perturbation.

use log::warn;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dispatch::{
    self, minimize_piecewise, Constraints, DispatchError, GenTerm, Instance, Mechanism, PiecewiseProblem, StorageTerm,
};
use crate::qp::{self, QuadraticProgram};
use crate::rainflow;
use crate::storage::{self, GeneratorParams, StorageParams};

/// SoC band the pattern profile is scaled into.
const PATTERN_LOW: f64 = 0.05;
const PATTERN_HIGH: f64 = 0.95;
/// Relative alignment residual (against `|d|`) under which the condition holds.
pub const ALIGNMENT_TOL: f64 = 1e-8;
/// Relative objective gap under which the prosumer market matches the planner.
pub const MATCH_TOL: f64 = 1e-6;
/// Bid perturbations tried by [`best_response_check`].
pub const PERTURBATIONS: [f64; 2] = [1e-3, 1e-2];
pub const BEST_RESPONSE_TOL: f64 = 1e-9;
const BALANCE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("degenerate instance: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

/// Closed-form competitive equilibrium of the prosumer market.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsumerEquilibrium {
    pub alphas: Vec<f64>,
    /// `+inf` for a storage whose pattern never cycles.
    pub beta_hats: Vec<f64>,
    pub delta: f64,
    pub lambda: Vec<f64>,
    /// Storages with an infinite bid.
    pub flagged: Vec<usize>,
    /// `|sum alpha lambda + sum beta_hat lambda - d|_inf`.
    pub balance_residual: f64,
}

/// Outcome of the social-alignment test.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentCertificate {
    pub holds: bool,
    /// Convex weights over `matrices`.
    pub gamma: Vec<f64>,
    pub matrices: Vec<DMatrix<f64>>,
    /// Least-squares residual with the capacity scaled out.
    pub residual: f64,
    pub enumeration_complete: bool,
}

/// SoC path of rates proportional to `v`, scaled into `[0.05, 0.95]`. The
/// Rainflow pattern does not depend on the scaling.
pub fn pattern_profile(v: &[f64]) -> Vec<f64> {
    let mut path = Vec::with_capacity(v.len() + 1);
    let mut level = 0.0;
    path.push(level);
    for x in v {
        level -= x;
        path.push(level);
    }
    let lo = path.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = path.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return vec![0.5 * (PATTERN_LOW + PATTERN_HIGH); path.len()];
    }
    let k = (PATTERN_HIGH - PATTERN_LOW) / range;
    path.iter().map(|p| PATTERN_LOW + k * (p - lo)).collect()
}

/// Canonical rate-to-depth matrix of a profile proportional to `v`.
pub fn pattern_matrix(v: &[f64], capacity: f64) -> DMatrix<f64> {
    rainflow::canonical_matrix(&pattern_profile(v), capacity)
}

fn check_demand(d: &[f64]) -> Result<(), EquilibriumError> {
    if d.is_empty() || d.iter().any(|v| !v.is_finite()) {
        return Err(EquilibriumError::Invalid(
            "demand must be a nonempty finite vector".into(),
        ));
    }
    if d.iter().all(|v| *v == 0.0) {
        return Err(EquilibriumError::Degenerate("zero demand".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `beta_hat = (1/b) v'v / v'N'Nv` for the pattern of `v`.
fn beta_hat(v: &[f64], s: &StorageParams) -> f64 {
    let n = pattern_matrix(v, s.capacity_mwh);
    let nv = &n * DVector::from_column_slice(v);
    let denom = nv.norm_squared();
    if denom <= f64::MIN_POSITIVE {
        return f64::INFINITY;
    }
    dot(v, v) / (s.b() * denom)
}

/// Closed-form prosumer equilibrium: `alpha_j = 1/c_j`, `beta_hat_i` from the
/// cycle pattern of `d`, and `lambda = delta d` with
/// `1/delta = sum alpha + sum beta_hat`.
pub fn prosumer_equilibrium(inst: &Instance) -> Result<ProsumerEquilibrium, EquilibriumError> {
    check_demand(&inst.demand)?;
    if let Some(j) = inst.generators.iter().position(|g| g.a != 0.0) {
        return Err(EquilibriumError::Unsupported(format!(
            "generator {j} has a nonzero linear cost coefficient"
        )));
    }
    if inst.generators.iter().any(|g| !(g.c > 0.0)) || inst.storages.iter().any(|s| !(s.b() > 0.0)) {
        return Err(EquilibriumError::Invalid("cost coefficients must be positive".into()));
    }
    let alphas: Vec<f64> = inst.generators.iter().map(|g| 1.0 / g.c).collect();
    let beta_hats: Vec<f64> = inst.storages.iter().map(|s| beta_hat(&inst.demand, s)).collect();
    let flagged: Vec<usize> = (0..beta_hats.len()).filter(|&i| beta_hats[i].is_infinite()).collect();
    if !flagged.is_empty() {
        warn!("storages {flagged:?} never cycle under the demand pattern; their bid is unbounded");
        return Ok(ProsumerEquilibrium {
            alphas,
            beta_hats,
            delta: 0.0,
            lambda: vec![0.0; inst.demand.len()],
            flagged,
            balance_residual: 0.0,
        });
    }
    let total: f64 = alphas.iter().chain(&beta_hats).sum();
    if total <= 0.0 {
        return Err(EquilibriumError::Degenerate("no participant supplies energy".into()));
    }
    let delta = 1.0 / total;
    let lambda: Vec<f64> = inst.demand.iter().map(|d| delta * d).collect();
    let balance_residual = lambda
        .iter()
        .zip(&inst.demand)
        .map(|(l, d)| (total * l - d).abs())
        .fold(0.0, f64::max);
    let scale = 1.0 + inst.demand.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if balance_residual > BALANCE_TOL * scale {
        warn!("prosumer equilibrium balances demand only to {balance_residual:e}");
    }
    Ok(ProsumerEquilibrium {
        alphas,
        beta_hats,
        delta,
        lambda,
        flagged,
        balance_residual,
    })
}

/// Tests whether some convex combination of the pieces active at the
/// pattern of `d` satisfies `sum gamma_k N_k'N_k d = (d'N'Nd / d'd) d`.
///
/// The matrices are compared with the capacity scaled out, so the verdict
/// does not depend on `capacity` or on the scale of `d`.
pub fn alignment_condition(d: &[f64], capacity: f64) -> Result<AlignmentCertificate, EquilibriumError> {
    check_demand(d)?;
    if !(capacity > 0.0) {
        return Err(EquilibriumError::Invalid("capacity must be positive".into()));
    }
    let op = rainflow::operator_for_path(&pattern_profile(d), 1.0);
    let dv = DVector::from_column_slice(d);
    let canonical = &op.matrices[op.canonical_index];
    let ratio = (canonical * &dv).norm_squared() / dv.norm_squared();
    let target = &dv * ratio;
    let m = op.matrices.len();
    let mut lhs = DMatrix::zeros(d.len(), m);
    for (k, n) in op.matrices.iter().enumerate() {
        lhs.set_column(k, &(n.transpose() * (n * &dv)));
    }
    let gamma = simplex_least_squares(&lhs, &target);
    let residual = (&lhs * &gamma - &target).norm();
    let holds = residual <= ALIGNMENT_TOL * dv.norm();
    Ok(AlignmentCertificate {
        holds,
        gamma: gamma.iter().copied().collect(),
        matrices: op.matrices.iter().map(|n| n / capacity).collect(),
        residual,
        enumeration_complete: op.enumeration_complete,
    })
}

/// `argmin |A gamma - b|` over the probability simplex.
fn simplex_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = a.ncols();
    if m == 1 {
        return DVector::from_element(1, 1.0);
    }
    let qp = QuadraticProgram::new(a.transpose() * a, -(a.transpose() * b))
        .with_equalities(DMatrix::from_element(1, m, 1.0), DVector::from_element(1, 1.0))
        .with_bounds(DVector::zeros(m), DVector::from_element(m, f64::INFINITY));
    match qp::solve(&qp) {
        Ok(sol) => sol.x.map(|v| v.max(0.0)) / sol.x.map(|v| v.max(0.0)).sum(),
        Err(e) => {
            warn!("simplex least squares failed: {e}");
            DVector::from_fn(m, |k, _| if k == 0 { 1.0 } else { 0.0 })
        }
    }
}

/// Truthful bids: `alpha_j = 1/c_j` for generators and `beta_i = 1/b_i` for
/// cycle bids.
pub fn truthful_bids(inst: &Instance) -> Result<(Vec<f64>, Vec<f64>), EquilibriumError> {
    let mut alphas = Vec::with_capacity(inst.generators.len());
    for (j, g) in inst.generators.iter().enumerate() {
        if !(g.c > 0.0) {
            return Err(EquilibriumError::Invalid(format!(
                "generator {j} has no quadratic cost"
            )));
        }
        alphas.push(1.0 / g.c);
    }
    let mut betas = Vec::with_capacity(inst.storages.len());
    for (i, s) in inst.storages.iter().enumerate() {
        let b = s.b();
        if !(b > 0.0) {
            return Err(EquilibriumError::Invalid(format!("storage {i} has no cycling cost")));
        }
        betas.push(1.0 / b);
    }
    Ok((alphas, betas))
}

/// Revenue `lambda'g` minus the true generation cost.
pub fn generator_profit(lambda: &[f64], g: &[f64], params: &GeneratorParams) -> f64 {
    dot(lambda, g) - storage::generation_cost(g, params)
}

/// Energy revenue `lambda'u` minus the true degradation cost.
pub fn storage_profit_prosumer(lambda: &[f64], u: &[f64], params: &StorageParams) -> f64 {
    dot(lambda, u) - storage::degradation_cost_unchecked(u, params.capacity_mwh, params.x0, params.b())
}

/// Cycle revenue `theta'nu` minus the true degradation cost `(b/2) nu'nu`.
pub fn storage_profit_cycle(theta: &[f64], nu: &[f64], params: &StorageParams) -> f64 {
    dot(theta, nu) - 0.5 * params.b() * dot(nu, nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Participant {
    Generator(usize),
    Storage(usize),
}

/// Bids of every participant. `storages` holds `beta_hat` in the prosumer
/// market and `beta` in the cycle-aware market.
#[derive(Debug, Clone, PartialEq)]
pub struct Bids {
    pub generators: Vec<f64>,
    pub storages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponseReport {
    pub participant: Participant,
    pub bid: f64,
    pub profit: f64,
    /// `(bid factor, profit)` for every perturbed bid.
    pub perturbed: Vec<(f64, f64)>,
    pub passed: bool,
}

/// Checks that no participant gains by scaling its bid by `1 +- eps` while
/// prices stay at the clearing of `bids`.
///
/// The prosumer market is cleared in the balance-only setting with uniform
/// price `lambda`; the cycle-aware market under all physical constraints
/// with generator prices `lambda + eta_lower - eta_upper` and cycle prices
/// `theta`. A perturbation fails if it raises profit by more than
/// `tolerance (1 + |profit|)`.
pub fn best_response_check(
    mechanism: Mechanism,
    inst: &Instance,
    bids: &Bids,
    participant: Participant,
    tolerance: f64,
) -> Result<BestResponseReport, EquilibriumError> {
    let profit: Box<dyn Fn(f64) -> f64> = match mechanism {
        Mechanism::Pbm => {
            let sol =
                dispatch::prosumer_clearing(inst, &bids.generators, &bids.storages, Constraints::PowerBalanceOnly)?;
            let lambda = sol.lambda;
            match participant {
                Participant::Generator(j) => {
                    let gp = participant_gen(inst, j)?.clone();
                    Box::new(move |alpha| {
                        let g: Vec<f64> = lambda.iter().map(|l| alpha * (l - gp.a)).collect();
                        generator_profit(&lambda, &g, &gp)
                    })
                }
                Participant::Storage(i) => {
                    let sp = participant_storage(inst, i)?.clone();
                    Box::new(move |beta_hat| {
                        let u: Vec<f64> = lambda.iter().map(|l| beta_hat * l).collect();
                        storage_profit_prosumer(&lambda, &u, &sp)
                    })
                }
            }
        }
        Mechanism::Cbm => {
            let sol = dispatch::cycle_aware_clearing(inst, &bids.generators, &bids.storages)?;
            match participant {
                Participant::Generator(j) => {
                    let gp = participant_gen(inst, j)?.clone();
                    let m = &sol.multipliers;
                    let price: Vec<f64> = (0..sol.lambda.len())
                        .map(|t| sol.lambda[t] + m.gen_lower[j][t] - m.gen_upper[j][t])
                        .collect();
                    Box::new(move |alpha| {
                        let g: Vec<f64> = price.iter().map(|p| alpha * (p - gp.a)).collect();
                        generator_profit(&price, &g, &gp)
                    })
                }
                Participant::Storage(i) => {
                    let sp = participant_storage(inst, i)?.clone();
                    let theta = sol.theta.map(|t| t[i].clone()).unwrap_or_default();
                    Box::new(move |beta| {
                        let nu: Vec<f64> = theta.iter().map(|p| beta * p).collect();
                        storage_profit_cycle(&theta, &nu, &sp)
                    })
                }
            }
        }
        other => {
            return Err(EquilibriumError::Invalid(format!("{other} has no bids to check")));
        }
    };
    let bid = match participant {
        Participant::Generator(j) => bids.generators.get(j),
        Participant::Storage(i) => bids.storages.get(i),
    }
    .copied()
    .ok_or_else(|| EquilibriumError::Invalid("participant has no bid".into()))?;
    Ok(perturbation_report(participant, bid, &*profit, tolerance))
}

fn participant_gen(inst: &Instance, j: usize) -> Result<&GeneratorParams, EquilibriumError> {
    inst.generators
        .get(j)
        .ok_or_else(|| EquilibriumError::Invalid(format!("no generator {j}")))
}

fn participant_storage(inst: &Instance, i: usize) -> Result<&StorageParams, EquilibriumError> {
    inst.storages
        .get(i)
        .ok_or_else(|| EquilibriumError::Invalid(format!("no storage {i}")))
}

fn perturbation_report(
    participant: Participant,
    bid: f64,
    profit: &dyn Fn(f64) -> f64,
    tolerance: f64,
) -> BestResponseReport {
    let base = profit(bid);
    let allowed = tolerance * (1.0 + base.abs());
    let perturbed: Vec<(f64, f64)> = PERTURBATIONS
        .iter()
        .flat_map(|&eps| [1.0 - eps, 1.0 + eps])
        .map(|factor| (factor, profit(bid * factor)))
        .collect();
    let passed = perturbed.iter().all(|&(_, p)| p <= base + allowed);
    BestResponseReport {
        participant,
        bid,
        profit: base,
        perturbed,
        passed,
    }
}

/// Result of comparing the prosumer equilibrium with the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerComparison {
    pub matches: bool,
    /// True social cost of the prosumer equilibrium dispatch.
    pub prosumer_cost: f64,
    pub planner_cost: f64,
    /// `(prosumer - planner) / (1 + |planner|)`.
    pub gap: f64,
}

/// Compares the true social cost of the prosumer equilibrium with the planner
/// optimum, both in the balance-only setting.
pub fn prosumer_matches_planner(inst: &Instance) -> Result<PlannerComparison, EquilibriumError> {
    let eq = prosumer_equilibrium(inst)?;
    let sol = dispatch::prosumer_clearing(inst, &eq.alphas, &eq.beta_hats, Constraints::PowerBalanceOnly)?;
    let prosumer_cost = true_social_cost(inst, &sol.g, &sol.u);
    let problem = PiecewiseProblem {
        instance: inst,
        gen_terms: inst
            .generators
            .iter()
            .map(|g| GenTerm { quad: g.c, lin: g.a })
            .collect(),
        storage_terms: inst.storages.iter().map(|s| StorageTerm::Cycle(s.b())).collect(),
        constraints: Constraints::PowerBalanceOnly,
    };
    let planner = minimize_piecewise(&problem, None)?.dispatch;
    let planner_cost = true_social_cost(inst, &planner.g, &planner.u);
    let gap = (prosumer_cost - planner_cost) / (1.0 + planner_cost.abs());
    Ok(PlannerComparison {
        matches: gap <= MATCH_TOL,
        prosumer_cost,
        planner_cost,
        gap,
    })
}

/// Generation cost plus degradation cost of a dispatch.
pub fn true_social_cost(inst: &Instance, g: &[Vec<f64>], u: &[Vec<f64>]) -> f64 {
    let gen: f64 = inst
        .generators
        .iter()
        .zip(g)
        .map(|(p, g)| storage::generation_cost(g, p))
        .sum();
    let cyc: f64 = inst
        .storages
        .iter()
        .zip(u)
        .map(|(s, u)| storage::degradation_cost_unchecked(u, s.capacity_mwh, s.x0, s.b()))
        .sum();
    gen + cyc
}
