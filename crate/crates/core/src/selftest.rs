//! Invariant suites behind the `selftest` command. Every suite is seeded and
//! reports only deterministic quantities.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dispatch::{self, Instance, Mechanism};
use crate::equilibrium;
use crate::rainflow::{self, SocProfile};
use crate::settlement;
use crate::storage::{GeneratorParams, RateProfile, StorageParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Random rates whose SoC path stays in `[0, 1]`.
pub fn random_feasible_rates(rng: &mut ChaCha8Rng, horizon: usize, capacity: f64, x0: f64) -> Vec<f64> {
    let mut prev = x0;
    (0..horizon)
        .map(|_| {
            let next: f64 = rng.gen_range(0.0..=1.0);
            let u = capacity * (prev - next);
            prev = next;
            u
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng, horizon: usize) -> Instance {
    let capacity = rng.gen_range(1.0..10.0);
    let demand = (0..horizon).map(|_| rng.gen_range(5.0..15.0)).collect();
    let b = rng.gen_range(0.1..1.0) * capacity * capacity;
    let bound = 0.25 * capacity;
    let x0 = [0.25, 0.5, 0.75][rng.gen_range(0..3)];
    Instance::new(
        demand,
        vec![GeneratorParams::new(rng.gen_range(0.2..1.0), 0.0, 0.0, 100.0).expect("valid generator")],
        vec![StorageParams::with_cost_coefficient(capacity, b, x0, -bound, bound).expect("valid storage")],
    )
    .expect("valid instance")
}

fn suite(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> SuiteResult {
    match body() {
        Ok(detail) => SuiteResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => SuiteResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn rainflow_consistency(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let horizon = rng.gen_range(2..=24);
        let capacity = rng.gen_range(0.5..5.0);
        let x0 = rng.gen_range(0.0..=1.0);
        let u = RateProfile::new(random_feasible_rates(&mut rng, horizon, capacity, x0)).map_err(|e| e.to_string())?;
        let nu = rainflow::depths_from_rates(&u, capacity, x0).map_err(|e| e.to_string())?;
        let path = crate::storage::soc_path(u.values(), capacity, x0);
        let profile = SocProfile::new(path).map_err(|e| e.to_string())?;
        let direct = rainflow::count_cycles(&profile).depths;
        let op = rainflow::rate_to_depth_operator(&u, capacity, x0).map_err(|e| e.to_string())?;
        let uv = DVector::from_column_slice(u.values());
        for n in &op.matrices {
            let nk = n * &uv;
            worst = nk.iter().zip(&nu).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
        worst = direct.iter().zip(&nu).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    if worst <= 1e-12 {
        Ok("200 profiles, depths agree to 1e-12".into())
    } else {
        Err(format!("max depth error {worst:.3e}"))
    }
}

fn rainflow_regression() -> Result<String, String> {
    let x = SocProfile::new(vec![0.2, 0.5, 0.4, 0.8, 0.3]).map_err(|e| e.to_string())?;
    let nu = rainflow::count_cycles(&x).depths;
    let expected = [0.1, 0.1, 0.6, 0.5];
    let ok = nu.len() == expected.len() && nu.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-12);
    if ok {
        Ok("depths 0.1, 0.1, 0.6, 0.5".into())
    } else {
        Err(format!("depths {nu:?}"))
    }
}

fn price_scaling(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..50 {
        let horizon = rng.gen_range(2..=12);
        let lambda: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let beta = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = lambda.iter().map(|l| beta * l).collect();
        if equilibrium::pattern_matrix(&lambda, 1.0) != equilibrium::pattern_matrix(&scaled, 1.0) {
            return Err(format!("pattern changed for pair {k}"));
        }
    }
    Ok("50 pairs keep their pattern".into())
}

fn closed_form() -> Result<String, String> {
    let inst = Instance::new(
        vec![12.0, 8.0],
        vec![GeneratorParams::unbounded(1.0, 0.0).map_err(|e| e.to_string())?],
        vec![StorageParams::with_cost_coefficient(1.0, 1.0, 0.5, -100.0, 100.0).map_err(|e| e.to_string())?],
    )
    .map_err(|e| e.to_string())?;
    let eq = equilibrium::prosumer_equilibrium(&inst).map_err(|e| e.to_string())?;
    let ok = (eq.beta_hats[0] - 0.52).abs() <= 1e-12
        && (1.0 / eq.delta - 1.52).abs() <= 1e-12
        && (eq.lambda[0] - 7.894737).abs() <= 1e-6
        && (eq.lambda[1] - 5.263158).abs() <= 1e-6;
    if ok {
        Ok(format!(
            "beta_hat {:.6}, lambda [{:.6}, {:.6}]",
            eq.beta_hats[0], eq.lambda[0], eq.lambda[1]
        ))
    } else {
        Err(format!("{eq:?}"))
    }
}

fn alignment() -> Result<String, String> {
    let mut agreed = 0;
    for demand in [vec![3.0, 3.0], vec![12.0, 8.0], vec![5.0; 4], vec![10.0, 4.0, 7.0]] {
        let inst = Instance::new(
            demand.clone(),
            vec![GeneratorParams::unbounded(1.0, 0.0).map_err(|e| e.to_string())?],
            vec![StorageParams::with_cost_coefficient(1.0, 1.0, 0.5, -100.0, 100.0).map_err(|e| e.to_string())?],
        )
        .map_err(|e| e.to_string())?;
        let cert = equilibrium::alignment_condition(&demand, 1.0).map_err(|e| e.to_string())?;
        let cmp = equilibrium::prosumer_matches_planner(&inst).map_err(|e| e.to_string())?;
        if cert.enumeration_complete && cert.holds != cmp.matches {
            return Err(format!(
                "demand {demand:?}: alignment {} but planner match {}",
                cert.holds, cmp.matches
            ));
        }
        agreed += 1;
    }
    Ok(format!("{agreed} instances agree"))
}

fn truthful_market(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let horizon = rng.gen_range(2..=8);
        let inst = random_instance(&mut rng, horizon);
        let planner = dispatch::social_planner(&inst).map_err(|e| e.to_string())?;
        let (alphas, betas) = equilibrium::truthful_bids(&inst).map_err(|e| e.to_string())?;
        let cbm = dispatch::cycle_aware_clearing(&inst, &alphas, &betas).map_err(|e| e.to_string())?;
        let gap = (cbm.objective - planner.objective).abs() / (1.0 + planner.objective.abs());
        worst = worst.max(gap);
        let out = settlement::settle(Mechanism::Cbm, &cbm, &inst).map_err(|e| e.to_string())?;
        let twice = 2.0 * out.cycling_cost;
        if (out.storage_payments[0] - twice).abs() > 1e-9 * (1.0 + twice) || out.storage_profits[0] < 0.0 {
            return Err("cycle payment differs from twice the degradation cost".into());
        }
    }
    if worst <= 1e-6 {
        Ok("10 instances match the planner within 1e-6".into())
    } else {
        Err(format!("relative gap {worst:.3e}"))
    }
}

fn marginal_price(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..5 {
        let horizon = rng.gen_range(2..=6);
        let inst = random_instance(&mut rng, horizon);
        let base = dispatch::social_planner(&inst).map_err(|e| e.to_string())?;
        let norm = inst.demand.iter().map(|d| d * d).sum::<f64>().sqrt();
        let eps = 1e-4 * norm;
        for t in 0..horizon {
            let mut up = inst.clone();
            up.demand[t] += eps;
            let mut down = inst.clone();
            down.demand[t] -= eps;
            let fu = dispatch::social_planner(&up).map_err(|e| e.to_string())?.objective;
            let fd = dispatch::social_planner(&down).map_err(|e| e.to_string())?.objective;
            let slope = (fu - fd) / (2.0 * eps);
            if (slope - base.lambda[t]).abs() > 0.01 * base.lambda[t].abs().max(1e-9) {
                return Err(format!(
                    "instance {k}, slot {}: price {} vs slope {slope}",
                    t + 1,
                    base.lambda[t]
                ));
            }
        }
    }
    Ok("5 instances, prices within 1% of the cost slope".into())
}

/// Runs every suite with the given seed.
pub fn run(seed: u64) -> Vec<SuiteResult> {
    vec![
        suite("rainflow consistency", || rainflow_consistency(seed)),
        suite("rainflow regression", rainflow_regression),
        suite("price scaling", || price_scaling(seed.wrapping_add(1))),
        suite("prosumer closed form", closed_form),
        suite("alignment", alignment),
        suite("truthful cycle market", || truthful_market(seed.wrapping_add(2))),
        suite("marginal price", || marginal_price(seed.wrapping_add(3))),
    ]
}
