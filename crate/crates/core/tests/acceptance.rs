//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cyclemarket::dispatch::{
    brute_force_oracle, cycle_aware_clearing, gcd_clearing, minimize_piecewise, prosumer_clearing, social_planner,
    Constraints, DispatchSolution, GenTerm, Instance, Mechanism, PiecewiseProblem, StorageTerm,
};
use cyclemarket::equilibrium::{
    alignment_condition, best_response_check, pattern_matrix, prosumer_equilibrium, prosumer_matches_planner,
    truthful_bids, Bids, Participant, BEST_RESPONSE_TOL,
};
use cyclemarket::rainflow::{count_cycles, depths_from_rates, rate_to_depth_operator, SocProfile};
use cyclemarket::scenario::{emit_sweep, prosumer_bids, run_sweep, OutputFormat, ScenarioConfig, SweepParam};
use cyclemarket::selftest;
use cyclemarket::settlement::settle;
use cyclemarket::storage::{soc_from_rates, GeneratorParams, RateProfile, StorageParams};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn feasible_rates(rng: &mut ChaCha8Rng, horizon: usize, capacity: f64, x0: f64) -> Vec<f64> {
    let mut prev = x0;
    (0..horizon)
        .map(|_| {
            let next = if rng.gen_bool(0.2) {
                prev
            } else {
                rng.gen_range(0.0..=1.0)
            };
            let u = capacity * (prev - next);
            prev = next;
            u
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng, horizon: usize, capacity: f64) -> Instance {
    let demand = (0..horizon).map(|_| rng.gen_range(5.0..15.0)).collect();
    let b = rng.gen_range(0.1..1.0) * capacity * capacity;
    let bound = 0.25 * capacity;
    let x0 = [0.25, 0.5, 0.75][rng.gen_range(0..3)];
    Instance::new(
        demand,
        vec![GeneratorParams::new(rng.gen_range(0.2..1.0), 0.0, 0.0, 100.0).unwrap()],
        vec![StorageParams::with_cost_coefficient(capacity, b, x0, -bound, bound).unwrap()],
    )
    .unwrap()
}

fn toy(demand: &[f64], c: f64, capacity: f64, b: f64, x0: f64, bound: f64) -> Instance {
    Instance::new(
        demand.to_vec(),
        vec![GeneratorParams::unbounded(c, 0.0).unwrap()],
        vec![StorageParams::with_cost_coefficient(capacity, b, x0, -bound, bound).unwrap()],
    )
    .unwrap()
}

fn rainflow_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    let mut matrices = 0;
    for _ in 0..1000 {
        let horizon = rng.gen_range(2..=24);
        let capacity = rng.gen_range(0.5..10.0);
        let x0 = rng.gen_range(0.0..=1.0);
        let u = RateProfile::new(feasible_rates(&mut rng, horizon, capacity, x0)).unwrap();
        let params = StorageParams::with_cost_coefficient(capacity, 1.0, x0, -capacity, capacity).unwrap();
        let nu = depths_from_rates(&u, capacity, x0).map_err(|e| e.to_string())?;
        let direct = count_cycles(&SocProfile::new(soc_from_rates(&u, &params)).unwrap()).depths;
        worst = nu.iter().zip(&direct).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        let op = rate_to_depth_operator(&u, capacity, x0).map_err(|e| e.to_string())?;
        let uv = DVector::from_column_slice(u.values());
        for n in &op.matrices {
            worst = (n * &uv).iter().zip(&nu).fold(worst, |m, (a, b)| m.max((a - b).abs()));
            matrices += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("max error {worst:.3e}"))?;
    Ok(format!("1000 profiles, {matrices} matrices, max error {worst:.1e}"))
}

fn figure_regression() -> Outcome {
    let x = SocProfile::new(vec![0.2, 0.5, 0.4, 0.8, 0.3]).unwrap();
    let nu = count_cycles(&x).depths;
    let expected = [0.1, 0.1, 0.6, 0.5];
    ensure(
        nu.len() == 4 && nu.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-15),
        || format!("depths {nu:?}"),
    )?;
    let e = 2.0;
    let u = RateProfile::new(vec![-0.3 * e, 0.1 * e, -0.4 * e, 0.5 * e]).unwrap();
    let op = rate_to_depth_operator(&u, e, 0.2).map_err(|e| e.to_string())?;
    let canonical = DMatrix::from_row_slice(
        4,
        4,
        &[0., 1., 0., 0., 0., 1., 0., 0., -1., -1., -1., 0., 0., 0., 0., 1.],
    ) / e;
    ensure(op.canonical() == &canonical, || {
        format!("canonical pattern {}", op.canonical())
    })?;

    let tied = RateProfile::new(vec![-0.3, 0.0, -0.3, 0.5]).unwrap();
    let op = rate_to_depth_operator(&tied, 1.0, 0.2).map_err(|e| e.to_string())?;
    let n1 = DMatrix::from_row_slice(
        4,
        4,
        &[0., 1., 0., 0., 0., 1., 0., 0., -1., -1., -1., 0., 0., 0., 0., 1.],
    );
    let n2 = DMatrix::from_row_slice(
        4,
        4,
        &[0., 0., 0., 0., 0., 0., 0., 0., -1., -1., -1., 0., 0., 0., 0., 1.],
    );
    ensure(op.enumeration_complete && op.matrices == vec![n1, n2], || {
        format!("tied profile gave {} matrices", op.len())
    })?;
    Ok("depths, canonical pattern and both tied matrices match".into())
}

fn price_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for k in 0..200 {
        let horizon = rng.gen_range(2..=24);
        let lambda: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-50.0..100.0)).collect();
        let beta = rng.gen_range(1e-3..1e3);
        let scaled: Vec<f64> = lambda.iter().map(|l| beta * l).collect();
        ensure(pattern_matrix(&lambda, 1.0) == pattern_matrix(&scaled, 1.0), || {
            format!("pair {k} changed pattern")
        })?;
    }
    Ok("200 pairs share their canonical pattern".into())
}

fn closed_form() -> Outcome {
    let inst = toy(&[12.0, 8.0], 1.0, 1.0, 1.0, 0.5, 1e3);
    let eq = prosumer_equilibrium(&inst).map_err(|e| e.to_string())?;
    ensure((eq.beta_hats[0] - 0.52).abs() <= 1e-6, || {
        format!("beta_hat {}", eq.beta_hats[0])
    })?;
    ensure((1.0 / eq.delta - 1.52).abs() <= 1e-6, || {
        format!("1/delta {}", 1.0 / eq.delta)
    })?;
    ensure(
        (eq.lambda[0] - 7.894737).abs() <= 1e-6 && (eq.lambda[1] - 5.263158).abs() <= 1e-6,
        || format!("lambda {:?}", eq.lambda),
    )?;
    let bids = Bids {
        generators: eq.alphas.clone(),
        storages: eq.beta_hats.clone(),
    };
    for p in [Participant::Generator(0), Participant::Storage(0)] {
        let report =
            best_response_check(Mechanism::Pbm, &inst, &bids, p, BEST_RESPONSE_TOL).map_err(|e| e.to_string())?;
        ensure(report.passed, || format!("{p:?} improves to {:?}", report.perturbed))?;
    }
    Ok(format!(
        "beta_hat {:.6}, lambda [{:.6}, {:.6}], best responses hold",
        eq.beta_hats[0], eq.lambda[0], eq.lambda[1]
    ))
}

fn alignment_biconditional() -> Outcome {
    let mut cases: Vec<(Vec<f64>, f64, f64, bool)> = Vec::new();
    for k in 0..15 {
        let level = 1.0 + k as f64;
        let horizon = 2 + k % 3;
        cases.push((
            vec![level; horizon],
            0.5 + 0.1 * k as f64,
            1.0 + 0.2 * (k % 4) as f64,
            true,
        ));
    }
    for k in 0..15 {
        let s = 0.5 + 0.25 * k as f64;
        cases.push((
            vec![12.0 * s, 8.0 * s],
            0.5 + 0.1 * k as f64,
            1.0 + 0.2 * (k % 4) as f64,
            false,
        ));
    }
    let mut complete = 0;
    for (k, (demand, c, b, expected)) in cases.iter().enumerate() {
        let inst = toy(demand, *c, 1.0, *b, 0.5, 1e4);
        let cert = alignment_condition(demand, 1.0).map_err(|e| e.to_string())?;
        let cmp = prosumer_matches_planner(&inst).map_err(|e| e.to_string())?;
        if !cert.enumeration_complete {
            continue;
        }
        complete += 1;
        ensure(cert.holds == cmp.matches, || {
            format!(
                "case {k}: alignment {} but planner match {} (gap {:e})",
                cert.holds, cmp.matches, cmp.gap
            )
        })?;
        ensure(cert.holds == *expected, || {
            format!("case {k}: family verdict {}", cert.holds)
        })?;
    }
    ensure(complete == cases.len(), || {
        format!("only {complete} of {} enumerations complete", cases.len())
    })?;
    Ok(format!("{complete} instances agree (15 hold, 15 fail)"))
}

fn truthful_cycle_market() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (mut gap, mut theta_res) = (0.0_f64, 0.0_f64);
    for _ in 0..50 {
        let horizon = rng.gen_range(2..=12);
        let capacity = rng.gen_range(1.0..10.0);
        let inst = random_instance(&mut rng, horizon, capacity);
        let planner = social_planner(&inst).map_err(|e| e.to_string())?;
        let (alphas, betas) = truthful_bids(&inst).map_err(|e| e.to_string())?;
        let cbm = cycle_aware_clearing(&inst, &alphas, &betas).map_err(|e| e.to_string())?;
        gap = gap.max((cbm.objective - planner.objective).abs() / planner.objective.abs().max(1.0));
        let theta = &cbm.theta.as_ref().ok_or("no cycle prices")?[0];
        theta_res = theta
            .iter()
            .zip(&cbm.nu[0])
            .fold(theta_res, |m, (th, nu)| m.max((th - nu / betas[0]).abs()));
    }
    ensure(gap <= 1e-6, || format!("relative gap {gap:.3e}"))?;
    ensure(theta_res <= 1e-8, || format!("theta residual {theta_res:.3e}"))?;
    Ok(format!(
        "50 instances, relative gap {gap:.1e}, theta residual {theta_res:.1e}"
    ))
}

fn brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let step = 0.005;
    let (mut excess, mut spread) = (f64::NEG_INFINITY, 0.0_f64);
    for k in 0..20 {
        let horizon = rng.gen_range(2..=4);
        let inst = random_instance(&mut rng, horizon, 1.0);
        let sol = social_planner(&inst).map_err(|e| e.to_string())?;
        let oracle = brute_force_oracle(&inst, step).map_err(|e| e.to_string())?;
        let diff = (sol.objective - oracle.objective).abs();
        excess = excess.max(diff);
        ensure(diff <= (step * step).max(1e-5), || {
            format!("instance {k}: solver {} oracle {}", sol.objective, oracle.objective)
        })?;
        let problem = PiecewiseProblem {
            instance: &inst,
            gen_terms: vec![GenTerm {
                quad: inst.generators[0].c,
                lin: inst.generators[0].a,
            }],
            storage_terms: vec![StorageTerm::Cycle(inst.storages[0].b())],
            constraints: Constraints::All,
        };
        let sto = &inst.storages[0];
        for _ in 0..10 {
            let start: Vec<f64> = (0..horizon)
                .map(|_| rng.gen_range(sto.rate_min..=sto.rate_max))
                .collect();
            let run = minimize_piecewise(&problem, Some(&[start]))
                .map_err(|e| e.to_string())?
                .dispatch;
            let rel = (run.objective - sol.objective).abs() / sol.objective.abs().max(1.0);
            spread = spread.max(rel);
        }
    }
    ensure(spread <= 1e-6, || format!("multi-start spread {spread:.3e}"))?;
    Ok(format!(
        "20 instances, oracle gap {excess:.1e}, multi-start spread {spread:.1e}"
    ))
}

fn toy_regression() -> Outcome {
    let inst = toy(&[12.0, 8.0], 1.0, 1.0, 1.0, 1.0, 1.0);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6;
    let planner = social_planner(&inst).map_err(|e| e.to_string())?;
    ensure(close(planner.u[0][0], 1.0) && close(planner.u[0][1], -1.0), || {
        format!("u {:?}", planner.u[0])
    })?;
    ensure(close(planner.g[0][0], 11.0) && close(planner.g[0][1], 9.0), || {
        format!("g {:?}", planner.g[0])
    })?;
    ensure(close(planner.objective, 102.0), || {
        format!("social cost {}", planner.objective)
    })?;
    let cbm = cycle_aware_clearing(&inst, &[1.0], &[1.0]).map_err(|e| e.to_string())?;
    let theta = &cbm.theta.as_ref().ok_or("no cycle prices")?[0];
    ensure(close(theta[0], 1.0) && close(theta[1], 1.0), || {
        format!("theta {theta:?}")
    })?;
    let out = settle(Mechanism::Cbm, &cbm, &inst).map_err(|e| e.to_string())?;
    ensure(close(out.social_cost, 102.0), || {
        format!("settled social cost {}", out.social_cost)
    })?;
    ensure(close(out.storage_payments[0], 2.0), || {
        format!("storage payment {}", out.storage_payments[0])
    })?;
    ensure(close(out.storage_profits[0], 1.0), || {
        format!("storage profit {}", out.storage_profits[0])
    })?;
    Ok("u [1, -1], g [11, 9], cost 102, theta [1, 1], payment 2, profit 1".into())
}

fn sweep_orderings() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for name in ["sweep_b.toml", "sweep_e.toml"] {
        let config = ScenarioConfig::load(&root().join("configs").join(name)).map_err(|e| e.to_string())?;
        let result = run_sweep(&config).map_err(|e| e.to_string())?;
        let failures = result.failures(1e-9);
        ensure(failures.is_empty(), || format!("{name}: {}", failures.join("; ")))?;
        let b_of = |value: f64| match result.param {
            SweepParam::B => value,
            SweepParam::E => config.storages[0].capital_cost_per_kwh,
        };
        let mut cbm_costs = Vec::new();
        for row in &result.rows {
            let get = |m: Mechanism| {
                row.outcomes
                    .iter()
                    .find(|o| o.mechanism == m)
                    .ok_or(format!("{name}: no {m} at {}", row.value))
            };
            let (cbm, pbm, gcd) = (get(Mechanism::Cbm)?, get(Mechanism::Pbm)?, get(Mechanism::Gcd)?);
            ensure(
                cbm.social_cost <= pbm.social_cost + 1e-9 && pbm.social_cost <= gcd.social_cost + 1e-9,
                || {
                    format!(
                        "{name} at {}: cost order {} {} {}",
                        row.value, cbm.social_cost, pbm.social_cost, gcd.social_cost
                    )
                },
            )?;
            ensure(cbm.storage_profit() >= pbm.storage_profit() - 1e-9, || {
                format!("{name} at {}: profit order", row.value)
            })?;
            if b_of(row.value) >= 200.0 {
                ensure(gcd.storage_profit() < 0.0, || {
                    format!("{name} at {}: GCD profit {}", row.value, gcd.storage_profit())
                })?;
            }
            cbm_costs.push(cbm.social_cost);
        }
        if result.param == SweepParam::E {
            ensure(cbm_costs.windows(2).all(|w| w[1] <= w[0] + 1e-9), || {
                format!("CBM cost not monotone in E: {cbm_costs:?}")
            })?;
        }
        notes.push(format!("{} points in {}", result.rows.len(), result.param.name()));
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed <= 60.0, || format!("took {elapsed:.1} s"))?;
    Ok(format!("{} in {elapsed:.1} s", notes.join(", ")))
}

/// Clears `inst` under `mechanism` with bids fixed in advance, so that demand
/// perturbations move only the clearing.
fn clear(mechanism: Mechanism, inst: &Instance, bids: &Bids) -> Result<DispatchSolution, String> {
    let sol = match mechanism {
        Mechanism::Social => social_planner(inst),
        Mechanism::Pbm => prosumer_clearing(inst, &bids.generators, &bids.storages, Constraints::All),
        Mechanism::Cbm => cycle_aware_clearing(inst, &bids.generators, &bids.storages),
        Mechanism::Gcd => gcd_clearing(inst).map(|(s, _)| s),
    };
    sol.map_err(|e| e.to_string())
}

fn marginal_prices() -> Outcome {
    let mut instances = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for _ in 0..6 {
        let horizon = rng.gen_range(2..=8);
        let capacity = rng.gen_range(1.0..10.0);
        instances.push(random_instance(&mut rng, horizon, capacity));
    }
    instances.push(toy(&[12.0, 8.0], 1.0, 1.0, 1.0, 1.0, 1.0));
    let config = ScenarioConfig::load(&root().join("configs/default.toml")).map_err(|e| e.to_string())?;
    instances.push(
        config
            .instance(&config.demand().map_err(|e| e.to_string())?, None)
            .map_err(|e| e.to_string())?,
    );

    let cases: Vec<(usize, Mechanism)> = (0..instances.len())
        .flat_map(|k| Mechanism::ALL.into_iter().map(move |m| (k, m)))
        .collect();
    let results: Vec<Result<(f64, usize), String>> = cases
        .par_iter()
        .map(|&(k, mechanism)| {
            let inst = &instances[k];
            let bids = match mechanism {
                Mechanism::Pbm => {
                    let eq = prosumer_bids(inst).map_err(|e| e.to_string())?;
                    Bids {
                        generators: eq.alphas,
                        storages: eq.beta_hats,
                    }
                }
                _ => {
                    let (alphas, betas) = truthful_bids(inst).map_err(|e| e.to_string())?;
                    Bids {
                        generators: alphas,
                        storages: betas,
                    }
                }
            };
            let base = clear(mechanism, inst, &bids)?;
            let eps = 1e-4 * inst.demand.iter().map(|d| d * d).sum::<f64>().sqrt();
            let mut worst = 0.0_f64;
            for t in 0..inst.horizon() {
                let shifted = |delta: f64| {
                    let mut p = inst.clone();
                    p.demand[t] += delta;
                    clear(mechanism, &p, &bids).map(|s| s.objective)
                };
                let slope = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
                let err = (slope - base.lambda[t]).abs() / base.lambda[t].abs().max(1e-9);
                worst = worst.max(err);
                ensure(err <= 0.01, || {
                    format!(
                        "instance {k}, {mechanism}, slot {}: lambda {} vs slope {slope}",
                        t + 1,
                        base.lambda[t]
                    )
                })?;
            }
            Ok((worst, inst.horizon()))
        })
        .collect();
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for r in results {
        let (w, n) = r?;
        worst = worst.max(w);
        checked += n;
    }
    Ok(format!(
        "{checked} prices across {} instances and 4 mechanisms, worst {:.2e}",
        instances.len(),
        worst
    ))
}

fn determinism() -> Outcome {
    let first = selftest::run(7);
    let second = selftest::run(7);
    let text = |r: &[selftest::SuiteResult]| r.iter().map(|s| format!("{s}\n")).collect::<String>();
    ensure(text(&first) == text(&second), || "selftest output differs".into())?;
    ensure(first.iter().all(|s| s.passed), || text(&first))?;

    let config = ScenarioConfig::load(&root().join("configs/sweep_b.toml")).map_err(|e| e.to_string())?;
    let dirs = [
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    ];
    let mut snapshots = Vec::new();
    for dir in &dirs {
        let result = run_sweep(&config).map_err(|e| e.to_string())?;
        for format in [OutputFormat::Csv, OutputFormat::Plotdata] {
            emit_sweep(&result, dir.path(), format).map_err(|e| e.to_string())?;
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        snapshots.push(files);
    }
    ensure(snapshots[0] == snapshots[1], || "sweep outputs differ".into())?;
    Ok(format!(
        "selftest and {} sweep files identical across runs",
        snapshots[0].len()
    ))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error"))
        .is_test(true)
        .init();
    let criteria: [Criterion; 11] = [
        ("1 rainflow oracle equivalence", rainflow_oracle),
        ("2 figure regression", figure_regression),
        ("3 price scaling keeps the pattern", price_scaling),
        ("4 prosumer closed form", closed_form),
        ("5 alignment biconditional", alignment_biconditional),
        ("6 truthful cycle market", truthful_cycle_market),
        ("7 brute force and multi-start", brute_force),
        ("8 analytic toy", toy_regression),
        ("9 sweep orderings", sweep_orderings),
        ("10 marginal prices", marginal_prices),
        ("11 determinism", determinism),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (name, run) in criteria {
        let clock = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = clock.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!(
        "acceptance: {} of 11 passed in {:.1} s",
        11 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
