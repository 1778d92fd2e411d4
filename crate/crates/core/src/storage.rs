//! Storage physics, degradation cost and generator cost.
//!
//! Conventions used throughout the crate:
//!
//! * one slot is one hour, so a rate in MW moves the same number of MWh per slot;
//! * storage rates are positive when discharging and negative when charging;
//! * state of charge is the stored energy as a fraction of capacity, `x_t = x_{t-1} - u_t / E`;
//! * capital cost `B` is quoted in $/kWh and converted to $/MWh, so the cost
//!   coefficient is `b = rho * B * 1000 * E` dollars for a capacity `E` in MWh.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::rainflow;

/// kWh per MWh, used to turn a $/kWh capital cost into $/MWh.
pub const KWH_PER_MWH: f64 = 1000.0;

/// Initial (and terminal) state of charge when a configuration omits it.
pub const DEFAULT_X0: f64 = 0.5;

/// Absolute tolerance on rate and state-of-charge bounds (normalized units for SoC).
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Periodicity tolerance, relative to the capacity: `|1'u| <= PERIODICITY_TOL * E`.
pub const PERIODICITY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid storage parameters: {0}")]
    InvalidStorage(String),
    #[error("invalid generator parameters: {0}")]
    InvalidGenerator(String),
    #[error("rate profile entry {slot} is not finite")]
    NonFiniteRate { slot: usize },
    #[error("state of charge leaves [0, 1] at node {node} (value {value})")]
    InfeasibleProfile { node: usize, value: f64 },
}

/// Storage unit parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageParams {
    /// Capacity `E` in MWh.
    pub capacity_mwh: f64,
    /// Capital cost `B` in $/kWh.
    pub capital_cost_per_kwh: f64,
    /// Quadratic stress coefficient `rho`.
    pub rho: f64,
    /// Initial and terminal state of charge.
    pub x0: f64,
    /// Lower rate bound in MW (charging limit, non-positive).
    pub rate_min: f64,
    /// Upper rate bound in MW (discharging limit, non-negative).
    pub rate_max: f64,
    cost_coefficient: f64,
}

impl StorageParams {
    pub fn new(
        capacity_mwh: f64,
        capital_cost_per_kwh: f64,
        rho: f64,
        x0: f64,
        rate_min: f64,
        rate_max: f64,
    ) -> Result<Self, ModelError> {
        let b = rho * capital_cost_per_kwh * KWH_PER_MWH * capacity_mwh;
        let params = Self {
            capacity_mwh,
            capital_cost_per_kwh,
            rho,
            x0,
            rate_min,
            rate_max,
            cost_coefficient: b,
        };
        params.validate()?;
        Ok(params)
    }

    /// Builds a unit directly from its cost coefficient `b` (in $), with `rho = 1`
    /// and the capital cost back-computed so that `b = rho * B * 1000 * E` still holds.
    pub fn with_cost_coefficient(
        capacity_mwh: f64,
        b: f64,
        x0: f64,
        rate_min: f64,
        rate_max: f64,
    ) -> Result<Self, ModelError> {
        if !(capacity_mwh > 0.0) {
            return Err(ModelError::InvalidStorage(format!(
                "capacity must be positive, got {capacity_mwh}"
            )));
        }
        let params = Self {
            capacity_mwh,
            capital_cost_per_kwh: b / (KWH_PER_MWH * capacity_mwh),
            rho: 1.0,
            x0,
            rate_min,
            rate_max,
            cost_coefficient: b,
        };
        params.validate()?;
        Ok(params)
    }

    /// Storage with the rate limits expressed as a fraction of capacity per slot.
    pub fn with_rate_fraction(
        capacity_mwh: f64,
        capital_cost_per_kwh: f64,
        rho: f64,
        x0: f64,
        rate_fraction: f64,
    ) -> Result<Self, ModelError> {
        let limit = rate_fraction * capacity_mwh;
        Self::new(capacity_mwh, capital_cost_per_kwh, rho, x0, -limit, limit)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidStorage(msg));
        if !(self.capacity_mwh > 0.0) || !self.capacity_mwh.is_finite() {
            return bad(format!("capacity must be positive, got {}", self.capacity_mwh));
        }
        if !(self.capital_cost_per_kwh >= 0.0) || !(self.rho >= 0.0) {
            return bad("capital cost and rho must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.x0) {
            return bad(format!("x0 must lie in [0, 1], got {}", self.x0));
        }
        if !(self.rate_min <= 0.0 && self.rate_max >= 0.0) {
            return bad(format!(
                "rate bounds must bracket zero, got [{}, {}]",
                self.rate_min, self.rate_max
            ));
        }
        if !self.cost_coefficient.is_finite() {
            return bad("cost coefficient is not finite".into());
        }
        Ok(())
    }

    /// Degradation cost coefficient `b` in dollars.
    pub fn b(&self) -> f64 {
        self.cost_coefficient
    }

    /// Copy with a different capacity; `b` and rate limits scale with it.
    pub fn rescaled(&self, capacity_mwh: f64) -> Result<Self, ModelError> {
        let ratio = capacity_mwh / self.capacity_mwh;
        Self::new(
            capacity_mwh,
            self.capital_cost_per_kwh,
            self.rho,
            self.x0,
            self.rate_min * ratio,
            self.rate_max * ratio,
        )
    }

    /// Copy with a different capital cost.
    pub fn with_capital_cost(&self, capital_cost_per_kwh: f64) -> Result<Self, ModelError> {
        Self::new(
            self.capacity_mwh,
            capital_cost_per_kwh,
            self.rho,
            self.x0,
            self.rate_min,
            self.rate_max,
        )
    }
}

/// Quadratic-cost generator: `(c/2) g'g + a 1'g` subject to `g_min <= g_t <= g_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub c: f64,
    pub a: f64,
    pub g_min: f64,
    pub g_max: f64,
}

impl GeneratorParams {
    pub fn new(c: f64, a: f64, g_min: f64, g_max: f64) -> Result<Self, ModelError> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(ModelError::InvalidGenerator(format!("c must be positive, got {c}")));
        }
        if !a.is_finite() || !(g_min <= g_max) {
            return Err(ModelError::InvalidGenerator(format!(
                "need finite a and g_min <= g_max, got a={a}, [{g_min}, {g_max}]"
            )));
        }
        Ok(Self { c, a, g_min, g_max })
    }

    /// Generator without capacity limits.
    pub fn unbounded(c: f64, a: f64) -> Result<Self, ModelError> {
        Self::new(c, a, f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Charge/discharge schedule in MW, discharge positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RateProfile(Vec<f64>);

impl RateProfile {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if let Some(slot) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteRate { slot });
        }
        Ok(Self(values))
    }

    pub fn zeros(horizon: usize) -> Self {
        Self(vec![0.0; horizon])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn horizon(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }
}

impl From<RateProfile> for Vec<f64> {
    fn from(p: RateProfile) -> Self {
        p.0
    }
}

/// SoC trajectory of length `T + 1` from the recursion `x_t = x_{t-1} - u_t / E`.
pub fn soc_path(u: &[f64], capacity_mwh: f64, x0: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(u.len() + 1);
    let mut level = x0;
    x.push(level);
    for &rate in u {
        level -= rate / capacity_mwh;
        x.push(level);
    }
    x
}

/// SoC trajectory induced by `u` for the given unit. No bounds are enforced.
pub fn soc_from_rates(u: &RateProfile, params: &StorageParams) -> Vec<f64> {
    soc_path(u.values(), params.capacity_mwh, params.x0)
}

/// One violated physical constraint. Slots are numbered `1..=T`, SoC nodes `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RateAbove { slot: usize, excess: f64 },
    RateBelow { slot: usize, excess: f64 },
    Periodicity { imbalance: f64 },
    SocAbove { node: usize, excess: f64 },
    SocBelow { node: usize, excess: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks rate bounds, periodicity and the SoC range written as
/// `(x0 - 1) 1 <= A~ u <= x0 1`.
pub fn check_feasible(u: &RateProfile, params: &StorageParams) -> FeasibilityReport {
    let mut violations = Vec::new();
    let values = u.values();
    for (k, &rate) in values.iter().enumerate() {
        if rate > params.rate_max + FEASIBILITY_TOL {
            violations.push(Violation::RateAbove {
                slot: k + 1,
                excess: rate - params.rate_max,
            });
        }
        if rate < params.rate_min - FEASIBILITY_TOL {
            violations.push(Violation::RateBelow {
                slot: k + 1,
                excess: params.rate_min - rate,
            });
        }
    }
    let net: f64 = values.iter().sum();
    if net.abs() > PERIODICITY_TOL * params.capacity_mwh {
        violations.push(Violation::Periodicity { imbalance: net });
    }
    if !values.is_empty() {
        let cumulative =
            cumulative_matrix(values.len(), params.capacity_mwh) * nalgebra::DVector::from_column_slice(values);
        for (k, &drawn) in cumulative.iter().enumerate() {
            // drawn = x0 - x_{k+1}
            if drawn > params.x0 + FEASIBILITY_TOL {
                violations.push(Violation::SocBelow {
                    node: k + 1,
                    excess: drawn - params.x0,
                });
            }
            if drawn < params.x0 - 1.0 - FEASIBILITY_TOL {
                violations.push(Violation::SocAbove {
                    node: k + 1,
                    excess: params.x0 - 1.0 - drawn,
                });
            }
        }
    }
    FeasibilityReport { violations }
}

pub(crate) fn check_soc_bounds(x: &[f64], tol: f64) -> Result<(), ModelError> {
    match x.iter().position(|&v| v < -tol || v > 1.0 + tol) {
        Some(node) => Err(ModelError::InfeasibleProfile { node, value: x[node] }),
        None => Ok(()),
    }
}

/// `(b/2) nu'nu` for an arbitrary (not necessarily in-bounds) trajectory.
pub(crate) fn degradation_cost_unchecked(u: &[f64], capacity_mwh: f64, x0: f64, b: f64) -> f64 {
    let x = soc_path(u, capacity_mwh, x0);
    let depths = rainflow::depths_of_path(&x);
    0.5 * b * depths.iter().map(|d| d * d).sum::<f64>()
}

/// Rainflow degradation cost `(b/2) nu'nu` of a rate schedule.
pub fn degradation_cost(u: &RateProfile, params: &StorageParams) -> Result<f64, ModelError> {
    let x = soc_from_rates(u, params);
    check_soc_bounds(&x, rainflow::SOC_TOL)?;
    Ok(degradation_cost_unchecked(
        u.values(),
        params.capacity_mwh,
        params.x0,
        params.b(),
    ))
}

/// `(c/2) g'g + a 1'g`.
pub fn generation_cost(g: &[f64], params: &GeneratorParams) -> f64 {
    let sq: f64 = g.iter().map(|v| v * v).sum();
    let total: f64 = g.iter().sum();
    0.5 * params.c * sq + params.a * total
}

/// Bidiagonal `A` (T x (T+1)) with `A x = -u / E`.
pub fn difference_matrix(horizon: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(horizon, horizon + 1);
    for t in 0..horizon {
        a[(t, t)] = -1.0;
        a[(t, t + 1)] = 1.0;
    }
    a
}

/// Lower-triangular cumulative matrix `A~ = (1/E) L`, so `(A~ u)_t = x0 - x_t`.
pub fn cumulative_matrix(horizon: usize, capacity_mwh: f64) -> DMatrix<f64> {
    DMatrix::from_fn(horizon, horizon, |r, c| if c <= r { 1.0 / capacity_mwh } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(x0: f64, bound: f64, b: f64) -> StorageParams {
        StorageParams::with_cost_coefficient(1.0, b, x0, -bound, bound).unwrap()
    }

    #[test]
    fn soc_recursion() {
        let e = 7.0;
        let u = RateProfile::new(vec![-0.3 * e, 0.1 * e, -0.4 * e, 0.5 * e]).unwrap();
        let p = StorageParams::with_cost_coefficient(e, 1.0, 0.2, -e, e).unwrap();
        let x = soc_from_rates(&u, &p);
        for (got, want) in x.iter().zip([0.2, 0.5, 0.4, 0.8, 0.3]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_eq!(soc_from_rates(&RateProfile::zeros(3), &p), vec![0.2; 4]);

        let half = StorageParams::with_cost_coefficient(2.0, 1.0, 0.5, -2.0, 2.0).unwrap();
        let x = soc_from_rates(&RateProfile::new(vec![1.0, -1.0]).unwrap(), &half);
        assert_eq!(x, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn feasibility_report() {
        let p = unit(1.0, 1.0, 1.0);
        assert!(check_feasible(&RateProfile::new(vec![1.0, -1.0]).unwrap(), &p).is_feasible());

        let report = check_feasible(&RateProfile::new(vec![2.0, -2.0]).unwrap(), &p);
        assert_eq!(
            report.violations,
            vec![
                Violation::RateAbove { slot: 1, excess: 1.0 },
                Violation::RateBelow { slot: 2, excess: 1.0 },
                Violation::SocBelow { node: 1, excess: 1.0 },
            ]
        );

        let report = check_feasible(&RateProfile::new(vec![1.0, 0.0]).unwrap(), &unit(0.5, 1.0, 1.0));
        assert!(report.violations.contains(&Violation::Periodicity { imbalance: 1.0 }));
    }

    #[test]
    fn degradation_examples() {
        let e = 3.0;
        let p = StorageParams::with_cost_coefficient(e, 1.0, 0.2, -e, e).unwrap();
        let u = RateProfile::new(vec![-0.3 * e, 0.1 * e, -0.4 * e, 0.5 * e]).unwrap();
        assert_abs_diff_eq!(degradation_cost(&u, &p).unwrap(), 0.315, epsilon = 1e-12);
        assert_eq!(degradation_cost(&RateProfile::zeros(4), &p).unwrap(), 0.0);

        let u = RateProfile::new(vec![1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(
            degradation_cost(&u, &unit(1.0, 1.0, 1.0)).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn degradation_rejects_out_of_range_profile() {
        let u = RateProfile::new(vec![2.0, -2.0]).unwrap();
        assert!(matches!(
            degradation_cost(&u, &unit(1.0, 5.0, 1.0)),
            Err(ModelError::InfeasibleProfile { node: 1, .. })
        ));
    }

    #[test]
    fn generation_cost_examples() {
        let g1 = GeneratorParams::unbounded(1.0, 0.0).unwrap();
        assert_eq!(generation_cost(&[10.0, 10.0], &g1), 100.0);
        assert_eq!(generation_cost(&[11.0, 9.0], &g1), 101.0);
        let g2 = GeneratorParams::unbounded(0.1, 20.0).unwrap();
        assert_abs_diff_eq!(generation_cost(&[10.0, 10.0], &g2), 410.0, epsilon = 1e-12);
    }

    #[test]
    fn structural_matrices() {
        let a = difference_matrix(2);
        assert_eq!(a, DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0]));
        let at = cumulative_matrix(2, 1.0);
        assert_eq!(at, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
        let x = nalgebra::DVector::from_vec(vec![0.5, 0.0, 0.5]);
        assert_eq!((a * x).as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn capital_cost_unit_conversion() {
        // One full cycle of depth delta costs rho * B * 1000 * E * delta^2.
        let p = StorageParams::new(100.0, 200.0, 5.24e-4, 0.5, -25.0, 25.0).unwrap();
        assert_abs_diff_eq!(p.b(), 5.24e-4 * 200.0 * 1000.0 * 100.0, epsilon = 1e-9);
        let delta = 0.2;
        let u = RateProfile::new(vec![delta * 100.0, -delta * 100.0]).unwrap();
        let cost = degradation_cost(&u, &p).unwrap();
        assert_abs_diff_eq!(cost, 5.24e-4 * 200.0 * 1000.0 * 100.0 * delta * delta, epsilon = 1e-9);
    }

    #[test]
    fn parameter_validation() {
        assert!(StorageParams::new(0.0, 1.0, 1.0, 0.5, -1.0, 1.0).is_err());
        assert!(StorageParams::new(1.0, 1.0, 1.0, 1.5, -1.0, 1.0).is_err());
        assert!(StorageParams::new(1.0, 1.0, 1.0, 0.5, 0.5, 1.0).is_err());
        assert!(GeneratorParams::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(GeneratorParams::new(1.0, 0.0, 2.0, 1.0).is_err());
        assert!(RateProfile::new(vec![f64::NAN]).is_err());
    }
}
