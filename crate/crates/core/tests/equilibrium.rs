use cyclemarket::dispatch::{Instance, Mechanism};
use cyclemarket::equilibrium::{
    alignment_condition, best_response_check, pattern_matrix, prosumer_equilibrium, prosumer_matches_planner,
    storage_profit_cycle, storage_profit_prosumer, truthful_bids, Bids, Participant, BEST_RESPONSE_TOL,
};
use cyclemarket::rainflow::rate_to_depth_operator;
use cyclemarket::storage::{GeneratorParams, RateProfile, StorageParams};
use proptest::prelude::*;

fn toy(demand: &[f64]) -> Instance {
    Instance::new(
        demand.to_vec(),
        vec![GeneratorParams::unbounded(1.0, 0.0).unwrap()],
        vec![StorageParams::with_cost_coefficient(1.0, 1.0, 0.5, -1e3, 1e3).unwrap()],
    )
    .unwrap()
}

#[test]
fn closed_form_prices() {
    let eq = prosumer_equilibrium(&toy(&[12.0, 8.0])).unwrap();
    // d'd = 208, d'N'Nd = 400
    assert!((eq.beta_hats[0] - 208.0 / 400.0).abs() < 1e-15);
    let expected = [12.0 / 1.52, 8.0 / 1.52];
    for (l, e) in eq.lambda.iter().zip(expected) {
        assert!((l - e).abs() < 1e-12);
    }
    assert!((eq.lambda[0] - 7.894737).abs() < 1e-6 && (eq.lambda[1] - 5.263158).abs() < 1e-6);

    let flat = prosumer_equilibrium(&toy(&[4.0, 4.0])).unwrap();
    assert!((flat.beta_hats[0] - 0.5).abs() < 1e-15);
    assert!((1.0 / flat.delta - 1.5).abs() < 1e-12);
}

#[test]
fn equilibrium_bids_are_best_responses() {
    let inst = toy(&[12.0, 8.0]);
    let eq = prosumer_equilibrium(&inst).unwrap();
    let bids = Bids {
        generators: eq.alphas.clone(),
        storages: eq.beta_hats.clone(),
    };
    for p in [Participant::Generator(0), Participant::Storage(0)] {
        let report = best_response_check(Mechanism::Pbm, &inst, &bids, p, BEST_RESPONSE_TOL).unwrap();
        assert!(report.passed, "{report:?}");
    }
    let doubled = Bids {
        generators: eq.alphas.clone(),
        storages: vec![2.0 * eq.beta_hats[0]],
    };
    let report = best_response_check(Mechanism::Pbm, &inst, &doubled, Participant::Storage(0), 0.0).unwrap();
    assert!(!report.passed);
    let sto = &inst.storages[0];
    let at = |beta_hat: f64| {
        let u: Vec<f64> = eq.lambda.iter().map(|l| beta_hat * l).collect();
        storage_profit_prosumer(&eq.lambda, &u, sto)
    };
    assert!(at(2.0 * eq.beta_hats[0]) < at(eq.beta_hats[0]));
}

#[test]
fn truthful_cycle_bids_are_best_responses() {
    let inst = Instance::new(
        vec![12.0, 8.0],
        vec![GeneratorParams::unbounded(1.0, 0.0).unwrap()],
        vec![StorageParams::with_cost_coefficient(1.0, 1.0, 1.0, -1.0, 1.0).unwrap()],
    )
    .unwrap();
    let (alphas, betas) = truthful_bids(&inst).unwrap();
    let bids = Bids {
        generators: alphas,
        storages: betas,
    };
    for p in [Participant::Generator(0), Participant::Storage(0)] {
        let report = best_response_check(Mechanism::Cbm, &inst, &bids, p, BEST_RESPONSE_TOL).unwrap();
        assert!(report.passed, "{report:?}");
    }
    assert!(best_response_check(Mechanism::Gcd, &inst, &bids, Participant::Storage(0), 1e-9).is_err());
}

#[test]
fn truthful_reciprocals() {
    let sto = StorageParams::with_rate_fraction(100.0, 200.0, 5.24e-4, 0.5, 0.25).unwrap();
    let inst = Instance::new(
        vec![300.0; 4],
        vec![GeneratorParams::unbounded(0.1, 20.0).unwrap()],
        vec![sto],
    )
    .unwrap();
    let (alphas, betas) = truthful_bids(&inst).unwrap();
    assert!((alphas[0] - 10.0).abs() < 1e-12);
    let b = 5.24e-4 * 200.0 * 1000.0 * 100.0;
    assert!((betas[0] - 1.0 / b).abs() < 1e-18);
}

#[test]
fn alignment_agrees_with_planner_comparison() {
    for d0 in [1.0, 3.5, 10.0] {
        let inst = toy(&[d0, d0]);
        let cmp = prosumer_matches_planner(&inst).unwrap();
        let cert = alignment_condition(&inst.demand, 1.0).unwrap();
        assert!(cert.holds && cmp.matches, "{cmp:?}");
    }
    let inst = toy(&[12.0, 8.0]);
    let cmp = prosumer_matches_planner(&inst).unwrap();
    assert!(!cmp.matches && cmp.gap > 0.0);
    assert!(!alignment_condition(&inst.demand, 1.0).unwrap().holds);

    let bare = Instance::new(
        vec![5.0, 7.0],
        vec![GeneratorParams::unbounded(1.0, 0.0).unwrap()],
        vec![],
    )
    .unwrap();
    assert!(prosumer_matches_planner(&bare).unwrap().matches);
}

proptest! {
    #[test]
    fn price_scaling_keeps_the_pattern(
        lambda in prop::collection::vec(-10.0f64..10.0, 2..12),
        beta in 0.01f64..100.0,
    ) {
        let total: f64 = lambda.iter().map(|l| l.abs()).sum();
        let capacity = 4.0 * total * beta.max(1.0);
        let base = rate_to_depth_operator(&RateProfile::new(lambda.clone()).unwrap(), capacity, 0.5).unwrap();
        let scaled: Vec<f64> = lambda.iter().map(|l| beta * l).collect();
        let other = rate_to_depth_operator(&RateProfile::new(scaled).unwrap(), capacity, 0.5).unwrap();
        prop_assert_eq!(base.canonical(), other.canonical());
        prop_assert_eq!(pattern_matrix(&lambda, 1.0), pattern_matrix(&lambda.iter().map(|l| l * beta).collect::<Vec<_>>(), 1.0));
    }

    #[test]
    fn truthful_cycle_bid_maximizes_profit(
        theta in prop::collection::vec(-5.0f64..5.0, 1..10),
        b in 0.1f64..10.0,
        factor in 0.5f64..1.5,
    ) {
        prop_assume!(theta.iter().any(|t| t.abs() > 1e-3));
        let sto = StorageParams::with_cost_coefficient(1.0, b, 0.5, -1.0, 1.0).unwrap();
        let profit = |beta: f64| {
            let nu: Vec<f64> = theta.iter().map(|t| beta * t).collect();
            storage_profit_cycle(&theta, &nu, &sto)
        };
        prop_assert!(profit(factor / b) <= profit(1.0 / b) + 1e-12 * (1.0 + profit(1.0 / b).abs()));
    }
}
