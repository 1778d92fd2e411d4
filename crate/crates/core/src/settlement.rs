//! Payments, profits and the social-cost decomposition of a cleared market.

use thiserror::Error;

use crate::dispatch::{DispatchSolution, Instance, Mechanism};
use crate::storage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SettlementError {
    #[error("incomplete solution: {0}")]
    IncompleteSolution(String),
    #[error("outcomes belong to different instances")]
    MixedInstances,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketOutcome {
    pub mechanism: Mechanism,
    pub demand: Vec<f64>,
    pub dispatch: DispatchSolution,
    pub generator_payments: Vec<f64>,
    pub storage_payments: Vec<f64>,
    /// Payment minus true cost.
    pub generator_profits: Vec<f64>,
    pub storage_profits: Vec<f64>,
    pub generation_cost: f64,
    /// True degradation cost of the dispatch, hidden from the clearing in
    /// generation-centric dispatch.
    pub cycling_cost: f64,
    pub social_cost: f64,
    /// `lambda'd`, what load pays at the energy price.
    pub energy_bill: f64,
    /// Energy bill minus all payments to participants.
    pub surplus: f64,
}

impl MarketOutcome {
    pub fn storage_profit(&self) -> f64 {
        self.storage_profits.iter().sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Settles `dispatch` against the true costs of `inst`.
///
/// Generators are paid `Theta_j'g_j` with `Theta_j = lambda + eta_lower - eta_upper`.
/// Storage is paid `theta_i'nu_i` in the cycle-aware market and `lambda'u_i`
/// otherwise.
pub fn settle(
    mechanism: Mechanism,
    dispatch: &DispatchSolution,
    inst: &Instance,
) -> Result<MarketOutcome, SettlementError> {
    let horizon = inst.horizon();
    let m = &dispatch.multipliers;
    let shape_ok = |v: &[Vec<f64>], n: usize| v.len() == n && v.iter().all(|x| x.len() == horizon);
    if dispatch.lambda.len() != horizon
        || !shape_ok(&dispatch.g, inst.generators.len())
        || !shape_ok(&dispatch.u, inst.storages.len())
    {
        return Err(SettlementError::IncompleteSolution(
            "dispatch does not match the instance".into(),
        ));
    }
    if !shape_ok(&m.gen_lower, inst.generators.len()) || !shape_ok(&m.gen_upper, inst.generators.len()) {
        return Err(SettlementError::IncompleteSolution(
            "generator bound multipliers missing".into(),
        ));
    }
    let lambda = &dispatch.lambda;
    let mut generator_payments = Vec::with_capacity(inst.generators.len());
    let mut generator_profits = Vec::with_capacity(inst.generators.len());
    let mut generation_cost = 0.0;
    for (j, gp) in inst.generators.iter().enumerate() {
        let price: Vec<f64> = (0..horizon)
            .map(|t| lambda[t] + m.gen_lower[j][t] - m.gen_upper[j][t])
            .collect();
        let pay = dot(&price, &dispatch.g[j]);
        let cost = storage::generation_cost(&dispatch.g[j], gp);
        generator_payments.push(pay);
        generator_profits.push(pay - cost);
        generation_cost += cost;
    }
    let mut storage_payments = Vec::with_capacity(inst.storages.len());
    let mut storage_profits = Vec::with_capacity(inst.storages.len());
    let mut cycling_cost = 0.0;
    for (i, sp) in inst.storages.iter().enumerate() {
        let u = &dispatch.u[i];
        let pay = if mechanism == Mechanism::Cbm {
            let theta = dispatch
                .theta
                .as_ref()
                .and_then(|t| t.get(i))
                .ok_or_else(|| SettlementError::IncompleteSolution("cycle prices missing".into()))?;
            let nu = dispatch
                .nu
                .get(i)
                .ok_or_else(|| SettlementError::IncompleteSolution("cycle depths missing".into()))?;
            dot(theta, nu)
        } else {
            dot(lambda, u)
        };
        let cost = storage::degradation_cost_unchecked(u, sp.capacity_mwh, sp.x0, sp.b());
        storage_payments.push(pay);
        storage_profits.push(pay - cost);
        cycling_cost += cost;
    }
    let energy_bill = dot(lambda, &inst.demand);
    let paid: f64 = generator_payments.iter().chain(&storage_payments).sum();
    Ok(MarketOutcome {
        mechanism,
        demand: inst.demand.clone(),
        dispatch: dispatch.clone(),
        generator_payments,
        storage_payments,
        generator_profits,
        storage_profits,
        generation_cost,
        cycling_cost,
        social_cost: generation_cost + cycling_cost,
        energy_bill,
        surplus: energy_bill - paid,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub mechanism: Mechanism,
    pub social_cost: f64,
    pub generation_cost: f64,
    pub cycling_cost: f64,
    pub storage_profit: f64,
    pub converged: bool,
}

/// One checked ordering `lhs <= rhs + tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, mechanism: Mechanism) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.mechanism == mechanism)
    }

    /// Orderings between the mechanisms present: social cost
    /// `social <= cbm <= pbm <= gcd` and storage profit `cbm >= pbm`.
    pub fn orderings(&self, tol: f64) -> Vec<OrderingCheck> {
        let mut out = Vec::new();
        let mut check = |name: &str, lhs: f64, rhs: f64| {
            out.push(OrderingCheck {
                name: name.into(),
                lhs,
                rhs,
                holds: lhs <= rhs + tol,
            });
        };
        let cost = |m| self.row(m).map(|r| r.social_cost);
        let profit = |m| self.row(m).map(|r| r.storage_profit);
        use Mechanism::*;
        for (name, a, b) in [
            ("social cost social <= cbm", Social, Cbm),
            ("social cost cbm <= pbm", Cbm, Pbm),
            ("social cost pbm <= gcd", Pbm, Gcd),
            ("social cost cbm <= gcd", Cbm, Gcd),
        ] {
            if let (Some(x), Some(y)) = (cost(a), cost(b)) {
                check(name, x, y);
            }
        }
        if let (Some(c), Some(p)) = (profit(Cbm), profit(Pbm)) {
            check("storage profit pbm <= cbm", p, c);
        }
        out
    }
}

/// Tabulates outcomes of the same instance.
pub fn compare(outcomes: &[MarketOutcome]) -> Result<Comparison, SettlementError> {
    if let Some(first) = outcomes.first() {
        if outcomes.iter().any(|o| o.demand != first.demand) {
            return Err(SettlementError::MixedInstances);
        }
    }
    Ok(Comparison {
        rows: outcomes
            .iter()
            .map(|o| ComparisonRow {
                mechanism: o.mechanism,
                social_cost: o.social_cost,
                generation_cost: o.generation_cost,
                cycling_cost: o.cycling_cost,
                storage_profit: o.storage_profit(),
                converged: o.dispatch.converged,
            })
            .collect(),
    })
}
