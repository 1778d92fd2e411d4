//! Dispatch problems: social planner, prosumer clearing, cycle-aware clearing
//! and generation-centric dispatch.
//!
//! All four share one variable layout, `[g_1 .. g_J, u_1 .. u_S]` with each
//! block of length `T`, and one constraint set:
//!
//! * power balance `sum_j g_j + sum_i u_i = d`;
//! * generator bounds and storage rate bounds;
//! * periodicity `1'u_i = 0`;
//! * state of charge within `[0, 1]`, written as `x0 - 1 <= A~ u_i <= x0`.
//!
//! Only the power balance is kept in [`Constraints::PowerBalanceOnly`] mode.
//! The energy price is the power balance multiplier, reported with the sign
//! that makes it equal to the marginal generation cost.

mod oracle;
mod piecewise;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{self, QpError, QpSolution, QuadraticProgram};
use crate::rainflow;
use crate::storage::{self, GeneratorParams, StorageParams};

pub use oracle::{brute_force_oracle, OracleResult, MAX_GRID_POINTS};
pub use piecewise::{minimize_piecewise, PieceCertificate, PiecewiseProblem, PiecewiseSolution, StorageTerm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid bids: {0}")]
    InvalidBids(String),
    #[error("all bids are zero, the clearing price is undefined")]
    DegenerateClearing,
    #[error("dispatch is infeasible: {0}")]
    Infeasible(String),
    #[error("quadratic program failed: {0}")]
    Qp(QpError),
    #[error("grid of {points} points exceeds the limit of {limit}")]
    GridTooLarge { points: f64, limit: f64 },
}

impl From<QpError> for DispatchError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::Infeasible(msg) => DispatchError::Infeasible(msg),
            other => DispatchError::Qp(other),
        }
    }
}

/// Demand profile plus participants.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub demand: Vec<f64>,
    pub generators: Vec<GeneratorParams>,
    pub storages: Vec<StorageParams>,
}

impl Instance {
    pub fn new(
        demand: Vec<f64>,
        generators: Vec<GeneratorParams>,
        storages: Vec<StorageParams>,
    ) -> Result<Self, DispatchError> {
        if demand.is_empty() {
            return Err(DispatchError::InvalidInstance("empty demand profile".into()));
        }
        if let Some(t) = demand.iter().position(|d| !d.is_finite()) {
            return Err(DispatchError::InvalidInstance(format!(
                "demand at slot {} is not finite",
                t + 1
            )));
        }
        if generators.is_empty() && storages.is_empty() {
            return Err(DispatchError::InvalidInstance("no participants".into()));
        }
        let inst = Self {
            demand,
            generators,
            storages,
        };
        let supply: f64 = inst.generators.iter().map(|g| g.g_max).sum::<f64>()
            + inst.storages.iter().map(|s| s.rate_max).sum::<f64>();
        let peak = inst.demand.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if supply < peak {
            warn!("peak demand {peak} exceeds total capacity {supply}; dispatch is likely infeasible");
        }
        Ok(inst)
    }

    pub fn horizon(&self) -> usize {
        self.demand.len()
    }
}

/// Which constraints enter the clearing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraints {
    All,
    PowerBalanceOnly,
}

/// Market mechanisms compared by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Social planner with true costs.
    Social,
    /// Prosumer market with linear supply-function bids.
    Pbm,
    /// Cycle-aware market with energy-cycling bids.
    Cbm,
    /// Generation-centric dispatch that ignores cycling.
    Gcd,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Social, Mechanism::Pbm, Mechanism::Cbm, Mechanism::Gcd];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Social => "social",
            Mechanism::Pbm => "pbm",
            Mechanism::Cbm => "cbm",
            Mechanism::Gcd => "gcd",
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mechanism '{s}'"))
    }
}

/// Constraint multipliers, nonnegative except `periodicity`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Multipliers {
    pub gen_lower: Vec<Vec<f64>>,
    pub gen_upper: Vec<Vec<f64>>,
    pub rate_lower: Vec<Vec<f64>>,
    pub rate_upper: Vec<Vec<f64>>,
    /// State of charge held at 0.
    pub soc_lower: Vec<Vec<f64>>,
    /// State of charge held at 1.
    pub soc_upper: Vec<Vec<f64>>,
    pub periodicity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    pub g: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    /// Energy price per slot, $/MWh.
    pub lambda: Vec<f64>,
    /// Per-cycle prices, present for cycle-priced problems.
    pub theta: Option<Vec<Vec<f64>>>,
    pub multipliers: Multipliers,
    /// Value of the problem's own objective.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Stationarity certificates for storages with a cycle cost.
    pub certificates: Vec<Option<PieceCertificate>>,
}

impl DispatchSolution {
    pub fn balance_residual(&self, demand: &[f64]) -> f64 {
        (0..demand.len())
            .map(|t| {
                let supplied: f64 = self.g.iter().map(|g| g[t]).sum::<f64>() + self.u.iter().map(|u| u[t]).sum::<f64>();
                (demand[t] - supplied).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Cost of one generator in a clearing: `(quad/2) g'g + lin 1'g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenTerm {
    pub quad: f64,
    pub lin: f64,
}

/// Variable layout and constraint assembly shared by all problems.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub horizon: usize,
    pub gens: usize,
    pub storages: usize,
}

impl Layout {
    pub fn of(inst: &Instance) -> Self {
        Self {
            horizon: inst.horizon(),
            gens: inst.generators.len(),
            storages: inst.storages.len(),
        }
    }

    pub fn base_vars(&self) -> usize {
        (self.gens + self.storages) * self.horizon
    }

    pub fn gen(&self, j: usize) -> usize {
        j * self.horizon
    }

    pub fn storage(&self, i: usize) -> usize {
        (self.gens + i) * self.horizon
    }
}

/// Constraint system over `extra` trailing variables in addition to the
/// base layout. The trailing variables are left free.
pub(crate) fn constraint_qp(
    inst: &Instance,
    layout: &Layout,
    constraints: Constraints,
    extra: usize,
    fixed_zero: &[bool],
) -> QuadraticProgram {
    let t_len = layout.horizon;
    let n = layout.base_vars() + extra;
    let physical = constraints == Constraints::All;
    let n_eq = t_len + if physical { layout.storages } else { 0 };
    let mut a_eq = DMatrix::zeros(n_eq, n);
    let mut b_eq = DVector::zeros(n_eq);
    for t in 0..t_len {
        for j in 0..layout.gens {
            a_eq[(t, layout.gen(j) + t)] = 1.0;
        }
        for i in 0..layout.storages {
            a_eq[(t, layout.storage(i) + t)] = 1.0;
        }
        b_eq[t] = inst.demand[t];
    }
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    let n_in = if physical { layout.storages * t_len } else { 0 };
    let mut a_in = DMatrix::zeros(n_in, n);
    let mut in_lo = DVector::zeros(n_in);
    let mut in_up = DVector::zeros(n_in);
    if physical {
        for (j, gp) in inst.generators.iter().enumerate() {
            for t in 0..t_len {
                lower[layout.gen(j) + t] = gp.g_min;
                upper[layout.gen(j) + t] = gp.g_max;
            }
        }
        for (i, sp) in inst.storages.iter().enumerate() {
            let col = layout.storage(i);
            for t in 0..t_len {
                a_eq[(t_len + i, col + t)] = 1.0;
                lower[col + t] = sp.rate_min;
                upper[col + t] = sp.rate_max;
                for s in 0..=t {
                    a_in[(i * t_len + t, col + s)] = 1.0 / sp.capacity_mwh;
                }
                in_lo[i * t_len + t] = sp.x0 - 1.0;
                in_up[i * t_len + t] = sp.x0;
            }
        }
    }
    for (i, &zero) in fixed_zero.iter().enumerate() {
        if zero {
            for t in 0..t_len {
                lower[layout.storage(i) + t] = 0.0;
                upper[layout.storage(i) + t] = 0.0;
            }
        }
    }
    QuadraticProgram::new(DMatrix::zeros(n, n), DVector::zeros(n))
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, in_lo, in_up)
        .with_bounds(lower, upper)
}

fn blocks(x: &DVector<f64>, start: usize, count: usize, len: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| x.rows(start + k * len, len).iter().copied().collect())
        .collect()
}

/// Energy price from generator stationarity on generators away from their
/// bounds; falls back to the balance multiplier when every generator is at a
/// bound in a slot.
pub(crate) fn recover_lambda(
    gen_terms: &[GenTerm],
    generators: &[GeneratorParams],
    g: &[Vec<f64>],
    balance_dual: &[f64],
    constraints: Constraints,
) -> Vec<f64> {
    (0..balance_dual.len())
        .map(|t| {
            let mut sum = 0.0;
            let mut count = 0;
            for (j, term) in gen_terms.iter().enumerate() {
                let v = g[j][t];
                let gp = &generators[j];
                let margin = 1e-7 * (1.0 + v.abs());
                let free =
                    constraints == Constraints::PowerBalanceOnly || (v > gp.g_min + margin && v < gp.g_max - margin);
                if free {
                    sum += term.quad * v + term.lin;
                    count += 1;
                }
            }
            if count > 0 {
                sum / count as f64
            } else {
                balance_dual[t]
            }
        })
        .collect()
}

/// Unpacks a QP solution over the base layout.
pub(crate) fn unpack(
    inst: &Instance,
    layout: &Layout,
    constraints: Constraints,
    gen_terms: &[GenTerm],
    x: &DVector<f64>,
    sol: &QpSolution,
) -> DispatchSolution {
    let t_len = layout.horizon;
    let g = blocks(x, 0, layout.gens, t_len);
    let u = blocks(x, layout.storage(0).min(x.len()), layout.storages, t_len);
    let soc: Vec<Vec<f64>> = inst
        .storages
        .iter()
        .zip(&u)
        .map(|(sp, ui)| storage::soc_path(ui, sp.capacity_mwh, sp.x0))
        .collect();
    let nu = soc.iter().map(|x| rainflow::depths_of_path(x)).collect();
    let balance: Vec<f64> = (0..t_len).map(|t| -sol.duals_eq[t]).collect();
    let lambda = recover_lambda(gen_terms, &inst.generators, &g, &balance, constraints);
    let mut m = Multipliers {
        gen_lower: blocks(&sol.duals_box_lower, 0, layout.gens, t_len),
        gen_upper: blocks(&sol.duals_box_upper, 0, layout.gens, t_len),
        rate_lower: blocks(&sol.duals_box_lower, layout.storage(0), layout.storages, t_len),
        rate_upper: blocks(&sol.duals_box_upper, layout.storage(0), layout.storages, t_len),
        ..Default::default()
    };
    if constraints == Constraints::All {
        m.periodicity = (0..layout.storages).map(|i| sol.duals_eq[t_len + i]).collect();
        m.soc_upper = blocks(&sol.duals_in_lower, 0, layout.storages, t_len);
        m.soc_lower = blocks(&sol.duals_in_upper, 0, layout.storages, t_len);
    } else {
        let zeros = vec![vec![0.0; t_len]; layout.storages];
        m.gen_lower = vec![vec![0.0; t_len]; layout.gens];
        m.gen_upper = m.gen_lower.clone();
        m.rate_lower = zeros.clone();
        m.rate_upper = zeros.clone();
        m.soc_lower = zeros.clone();
        m.soc_upper = zeros;
        m.periodicity = vec![0.0; layout.storages];
    }
    DispatchSolution {
        g,
        u,
        nu,
        x: soc,
        lambda,
        theta: None,
        multipliers: m,
        objective: sol.objective,
        iterations: sol.iterations,
        converged: true,
        certificates: vec![None; layout.storages],
    }
}

fn true_gen_terms(inst: &Instance) -> Vec<GenTerm> {
    inst.generators
        .iter()
        .map(|g| GenTerm { quad: g.c, lin: g.a })
        .collect()
}

fn check_bids(name: &str, values: &[f64], expected: usize, allow_zero: bool) -> Result<(), DispatchError> {
    if values.len() != expected {
        return Err(DispatchError::InvalidBids(format!(
            "expected {expected} {name} values, got {}",
            values.len()
        )));
    }
    for &v in values {
        let ok = if allow_zero { v >= 0.0 } else { v > 0.0 };
        if !ok || v.is_nan() {
            return Err(DispatchError::InvalidBids(format!("{name} value {v} out of range")));
        }
    }
    Ok(())
}

/// Minimizes true generation plus degradation cost under all physical constraints.
pub fn social_planner(inst: &Instance) -> Result<DispatchSolution, DispatchError> {
    let problem = PiecewiseProblem {
        instance: inst,
        gen_terms: true_gen_terms(inst),
        storage_terms: inst.storages.iter().map(|s| StorageTerm::Cycle(s.b())).collect(),
        constraints: Constraints::All,
    };
    let mut sol = minimize_piecewise(&problem, None)?.dispatch;
    sol.theta = Some(
        inst.storages
            .iter()
            .zip(&sol.nu)
            .map(|(s, nu)| nu.iter().map(|v| s.b() * v).collect())
            .collect(),
    );
    Ok(sol)
}

/// Clears supply-function bids `g_j = alpha_j (lambda - a_j)`,
/// `u_i = beta_hat_i * lambda`, where `a_j` is the generator's linear cost
/// coefficient.
///
/// With [`Constraints::PowerBalanceOnly`] the clearing has the closed form
/// `lambda = (d + sum alpha_j a_j) / (sum alpha + sum beta_hat)`; an infinite
/// `beta_hat` takes the whole demand at zero price. With [`Constraints::All`] the bids are
/// cleared as the quadratic program they define, under every physical
/// constraint.
pub fn prosumer_clearing(
    inst: &Instance,
    alphas: &[f64],
    beta_hats: &[f64],
    constraints: Constraints,
) -> Result<DispatchSolution, DispatchError> {
    check_bids("alpha", alphas, inst.generators.len(), true)?;
    check_bids("beta_hat", beta_hats, inst.storages.len(), true)?;
    let total: f64 = alphas.iter().chain(beta_hats).sum();
    if total <= 0.0 {
        return Err(DispatchError::DegenerateClearing);
    }
    let layout = Layout::of(inst);
    let gen_terms: Vec<GenTerm> = alphas
        .iter()
        .zip(&inst.generators)
        .map(|(&a, gp)| GenTerm {
            quad: if a > 0.0 { 1.0 / a } else { 0.0 },
            lin: gp.a,
        })
        .collect();
    let bid_objective = |g: &[Vec<f64>], u: &[Vec<f64>]| {
        let gen: f64 = g
            .iter()
            .zip(alphas)
            .zip(&inst.generators)
            .filter(|((_, &a), _)| a > 0.0)
            .map(|((g, &a), gp)| g.iter().map(|v| v * v / (2.0 * a) + gp.a * v).sum::<f64>())
            .sum();
        let sto: f64 = u
            .iter()
            .zip(beta_hats)
            .filter(|(_, &b)| b > 0.0 && b.is_finite())
            .map(|(u, &b)| u.iter().map(|v| v * v).sum::<f64>() / (2.0 * b))
            .sum();
        gen + sto
    };
    let fixed_zero: Vec<bool> = beta_hats.iter().map(|&b| b == 0.0).collect();

    let qp_path = || -> Result<DispatchSolution, DispatchError> {
        let mut qp = constraint_qp(inst, &layout, constraints, 0, &fixed_zero);
        for (j, &a) in alphas.iter().enumerate() {
            for t in 0..layout.horizon {
                let k = layout.gen(j) + t;
                if a > 0.0 {
                    qp.q_matrix[(k, k)] = 1.0 / a;
                    qp.q[k] = inst.generators[j].a;
                } else {
                    qp.var_lower[k] = 0.0;
                    qp.var_upper[k] = 0.0;
                }
            }
        }
        for (i, &b) in beta_hats.iter().enumerate() {
            for t in 0..layout.horizon {
                let k = layout.storage(i) + t;
                if b > 0.0 && b.is_finite() {
                    qp.q_matrix[(k, k)] = 1.0 / b;
                }
            }
        }
        let sol = qp::solve(&qp)?;
        let mut out = unpack(inst, &layout, constraints, &gen_terms, &sol.x, &sol);
        if alphas.contains(&0.0) {
            // a generator held at zero carries no marginal cost information
            out.lambda = (0..layout.horizon).map(|t| -sol.duals_eq[t]).collect();
        }
        out.objective = bid_objective(&out.g, &out.u);
        Ok(out)
    };

    if constraints == Constraints::All {
        return qp_path();
    }

    let infinite: Vec<usize> = (0..beta_hats.len()).filter(|&i| beta_hats[i].is_infinite()).collect();
    let offset: f64 = alphas.iter().zip(&inst.generators).map(|(&a, gp)| a * gp.a).sum();
    let lambda: Vec<f64> = if infinite.is_empty() {
        inst.demand.iter().map(|d| (d + offset) / total).collect()
    } else {
        vec![0.0; layout.horizon]
    };
    let g: Vec<Vec<f64>> = alphas
        .iter()
        .zip(&inst.generators)
        .map(|(&a, gp)| {
            if infinite.is_empty() {
                lambda.iter().map(|l| a * (l - gp.a)).collect()
            } else {
                vec![0.0; layout.horizon]
            }
        })
        .collect();
    let u: Vec<Vec<f64>> = beta_hats
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if infinite.is_empty() {
                lambda.iter().map(|l| b * l).collect()
            } else if infinite.contains(&i) {
                inst.demand.iter().map(|d| d / infinite.len() as f64).collect()
            } else {
                vec![0.0; layout.horizon]
            }
        })
        .collect();
    if infinite.is_empty() {
        let check = qp_path()?;
        let scale = 1.0 + lambda.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let gap = check
            .lambda
            .iter()
            .zip(&lambda)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if gap > 1e-6 * scale {
            warn!("prosumer clearing: solver price differs from closed form by {gap}");
        }
    }
    let x: Vec<Vec<f64>> = inst
        .storages
        .iter()
        .zip(&u)
        .map(|(sp, ui)| storage::soc_path(ui, sp.capacity_mwh, sp.x0))
        .collect();
    let zeros_g = vec![vec![0.0; layout.horizon]; layout.gens];
    let zeros_s = vec![vec![0.0; layout.horizon]; layout.storages];
    Ok(DispatchSolution {
        objective: bid_objective(&g, &u),
        nu: x.iter().map(|p| rainflow::depths_of_path(p)).collect(),
        x,
        g,
        u,
        lambda,
        theta: None,
        multipliers: Multipliers {
            gen_lower: zeros_g.clone(),
            gen_upper: zeros_g,
            rate_lower: zeros_s.clone(),
            rate_upper: zeros_s.clone(),
            soc_lower: zeros_s.clone(),
            soc_upper: zeros_s,
            periodicity: vec![0.0; layout.storages],
        },
        iterations: 0,
        converged: true,
        certificates: vec![None; layout.storages],
    })
}

/// Clears generator bids `alpha_j` and cycle bids `beta_i`: minimizes
/// `sum 1/(2 beta_i) nu_i'nu_i + sum (1/(2 alpha_j) g_j'g_j + a_j 1'g_j)` under
/// all physical constraints. Per-cycle prices are `theta_i = nu_i / beta_i`.
pub fn cycle_aware_clearing(inst: &Instance, alphas: &[f64], betas: &[f64]) -> Result<DispatchSolution, DispatchError> {
    check_bids("alpha", alphas, inst.generators.len(), false)?;
    check_bids("beta", betas, inst.storages.len(), false)?;
    let problem = PiecewiseProblem {
        instance: inst,
        gen_terms: alphas
            .iter()
            .zip(&inst.generators)
            .map(|(&a, gp)| GenTerm {
                quad: 1.0 / a,
                lin: gp.a,
            })
            .collect(),
        storage_terms: betas
            .iter()
            .map(|&b| {
                if b.is_finite() {
                    StorageTerm::Cycle(1.0 / b)
                } else {
                    StorageTerm::Free
                }
            })
            .collect(),
        constraints: Constraints::All,
    };
    let mut sol = minimize_piecewise(&problem, None)?.dispatch;
    sol.theta = Some(
        betas
            .iter()
            .zip(&sol.nu)
            .map(|(&b, nu)| nu.iter().map(|v| v / b).collect())
            .collect(),
    );
    Ok(sol)
}

/// Generation-centric dispatch: generation cost only, cycling ignored.
/// Returns the schedule and the degradation cost it actually incurs.
pub fn gcd_clearing(inst: &Instance) -> Result<(DispatchSolution, f64), DispatchError> {
    let problem = PiecewiseProblem {
        instance: inst,
        gen_terms: true_gen_terms(inst),
        storage_terms: vec![StorageTerm::Free; inst.storages.len()],
        constraints: Constraints::All,
    };
    let sol = minimize_piecewise(&problem, None)?.dispatch;
    let hidden = inst
        .storages
        .iter()
        .zip(&sol.nu)
        .map(|(s, nu)| 0.5 * s.b() * nu.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok((sol, hidden))
}
