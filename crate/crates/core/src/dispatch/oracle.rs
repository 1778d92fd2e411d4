//! Exhaustive grid search for tiny social planner instances.

use super::{DispatchError, Instance};
use crate::storage::{self, FEASIBILITY_TOL};

/// Largest grid the oracle will enumerate.
pub const MAX_GRID_POINTS: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub objective: f64,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
    pub points: usize,
}

/// Global minimum of the social planner objective over a grid of storage
/// rates. One generator and one storage, `T <= 4`; the generator covers the
/// residual demand and the last rate closes the cycle.
pub fn brute_force_oracle(inst: &Instance, step: f64) -> Result<OracleResult, DispatchError> {
    let horizon = inst.horizon();
    if horizon > 4 || inst.generators.len() != 1 || inst.storages.len() != 1 {
        return Err(DispatchError::InvalidInstance(
            "the oracle handles one generator, one storage and at most 4 slots".into(),
        ));
    }
    if !(step > 0.0) {
        return Err(DispatchError::InvalidInstance(format!(
            "grid step must be positive, got {step}"
        )));
    }
    let gen = &inst.generators[0];
    let sto = &inst.storages[0];
    let levels = ((sto.rate_max - sto.rate_min) / step).floor() as usize + 1;
    let free = horizon.saturating_sub(1);
    let points = (levels as f64).powi(free as i32);
    if points > MAX_GRID_POINTS {
        return Err(DispatchError::GridTooLarge {
            points,
            limit: MAX_GRID_POINTS,
        });
    }
    let points = points as usize;
    let mut best: Option<OracleResult> = None;
    let mut u = vec![0.0; horizon];
    let mut g = vec![0.0; horizon];
    for mut k in 0..points {
        let mut total = 0.0;
        for slot in u.iter_mut().take(free) {
            *slot = sto.rate_min + (k % levels) as f64 * step;
            k /= levels;
            total += *slot;
        }
        u[horizon - 1] = -total;
        if u[horizon - 1] < sto.rate_min - FEASIBILITY_TOL || u[horizon - 1] > sto.rate_max + FEASIBILITY_TOL {
            continue;
        }
        let x = storage::soc_path(&u, sto.capacity_mwh, sto.x0);
        if x.iter().any(|v| *v < -FEASIBILITY_TOL || *v > 1.0 + FEASIBILITY_TOL) {
            continue;
        }
        for t in 0..horizon {
            g[t] = inst.demand[t] - u[t];
        }
        if g.iter()
            .any(|v| *v < gen.g_min - FEASIBILITY_TOL || *v > gen.g_max + FEASIBILITY_TOL)
        {
            continue;
        }
        let f = storage::generation_cost(&g, gen)
            + storage::degradation_cost_unchecked(&u, sto.capacity_mwh, sto.x0, sto.b());
        if best.as_ref().is_none_or(|b| f < b.objective) {
            best = Some(OracleResult {
                objective: f,
                u: u.clone(),
                g: g.clone(),
                points,
            });
        }
    }
    best.ok_or_else(|| DispatchError::Infeasible("no grid point satisfies the constraints".into()))
}
