//! Experiment harness: configuration, demand ingestion, scenario runs and
//! parameter sweeps.

mod report;

use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::dispatch::{self, Constraints, DispatchError, Instance, Mechanism};
use crate::equilibrium::{self, EquilibriumError, ProsumerEquilibrium};
use crate::settlement::{self, Comparison, MarketOutcome, OrderingCheck, SettlementError};
use crate::storage::{GeneratorParams, ModelError, StorageParams, DEFAULT_X0};

pub use report::{emit_run, emit_sweep, OutputFormat};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{0}: no demand rows")]
    EmptyDemand(PathBuf),
    #[error("{mechanism}: {message}")]
    Mechanism { mechanism: Mechanism, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Settlement(#[from] SettlementError),
    #[error("ordering violated: {0}")]
    Ordering(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSource {
    /// CSV file, relative to the configuration file.
    pub path: Option<PathBuf>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub c: f64,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub g_min: f64,
    #[serde(default = "infinity")]
    pub g_max: f64,
}

fn infinity() -> f64 {
    f64::INFINITY
}

fn default_x0() -> f64 {
    DEFAULT_X0
}

fn default_rate_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageConfig {
    pub capacity_mwh: f64,
    pub capital_cost_per_kwh: f64,
    pub rho: f64,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default = "default_rate_fraction")]
    pub rate_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum SweepParam {
    /// Storage capital cost in $/kWh.
    B,
    /// Storage capacity in MWh.
    E,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::B => "B",
            SweepParam::E => "E",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub from: f64,
    pub to: f64,
    pub steps: usize,
}

impl SweepSpec {
    /// Evenly spaced values from `from` to `to`, both included.
    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.from];
        }
        let span = self.to - self.from;
        (0..self.steps)
            .map(|k| self.from + span * k as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub horizon: usize,
    pub demand: DemandSource,
    pub generators: Vec<GeneratorConfig>,
    #[serde(default)]
    pub storages: Vec<StorageConfig>,
    pub mechanisms: Vec<Mechanism>,
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Directory the demand path is resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ScenarioConfig {
    /// Parses a TOML document. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let config: Self = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.into(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Config(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        match (&self.demand.path, &self.demand.values) {
            (Some(_), Some(_)) | (None, None) => return bad("demand needs exactly one of path and values"),
            (None, Some(v)) if v.len() != self.horizon => return bad("demand length differs from horizon"),
            _ => {}
        }
        if self.generators.is_empty() {
            return bad("at least one generator is required");
        }
        if self.mechanisms.is_empty() {
            return bad("no mechanisms requested");
        }
        let mut seen = self.mechanisms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.mechanisms.len() {
            return bad("mechanisms are listed twice");
        }
        if let Some(s) = &self.sweep {
            if s.steps == 0 {
                return bad("sweep needs at least one step");
            }
            if !(s.from > 0.0) || !s.to.is_finite() {
                return bad("sweep range must be positive");
            }
            if s.steps > 1 && !(s.to > s.from) {
                return bad("sweep range must be increasing");
            }
            if self.storages.is_empty() {
                return bad("sweeps vary storage parameters but no storage is configured");
            }
        }
        Ok(())
    }

    pub fn demand(&self) -> Result<Vec<f64>, ScenarioError> {
        let demand = match (&self.demand.path, &self.demand.values) {
            (Some(p), _) => load_demand(&self.base_dir.join(p))?,
            (None, Some(v)) => v.clone(),
            (None, None) => return Err(ScenarioError::Config("no demand source".into())),
        };
        if demand.len() != self.horizon {
            return Err(ScenarioError::Config(format!(
                "demand has {} slots, horizon is {}",
                demand.len(),
                self.horizon
            )));
        }
        Ok(demand)
    }

    /// Market instance for the configuration, with storages optionally
    /// overridden by a sweep value.
    pub fn instance(&self, demand: &[f64], sweep_value: Option<f64>) -> Result<Instance, ScenarioError> {
        let generators = self
            .generators
            .iter()
            .map(|g| GeneratorParams::new(g.c, g.a, g.g_min, g.g_max))
            .collect::<Result<Vec<_>, _>>()?;
        let param = self.sweep.as_ref().map(|s| s.param);
        let storages = self
            .storages
            .iter()
            .map(|s| {
                let (e, b) = match (param, sweep_value) {
                    (Some(SweepParam::E), Some(v)) => (v, s.capital_cost_per_kwh),
                    (Some(SweepParam::B), Some(v)) => (s.capacity_mwh, v),
                    _ => (s.capacity_mwh, s.capital_cost_per_kwh),
                };
                StorageParams::with_rate_fraction(e, b, s.rho, s.x0, s.rate_fraction)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Instance::new(demand.to_vec(), generators, storages)?)
    }
}

#[derive(Debug, Deserialize)]
struct DemandRow {
    slot: i64,
    demand_mw: f64,
}

/// Reads a demand CSV with header `slot,demand_mw` and consecutive slots.
pub fn load_demand(path: &Path) -> Result<Vec<f64>, ScenarioError> {
    let file = std::fs::File::open(path).map_err(|source| ScenarioError::Io {
        path: path.into(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    let mut last: Option<i64> = None;
    for record in reader.deserialize::<DemandRow>() {
        let row = record.map_err(|e| ScenarioError::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = out.len() as u64 + 2;
        if let Some(prev) = last {
            if row.slot != prev + 1 {
                return Err(ScenarioError::Parse {
                    path: path.into(),
                    line,
                    message: format!("slot {} does not follow slot {prev}", row.slot),
                });
            }
        }
        if !row.demand_mw.is_finite() {
            return Err(ScenarioError::Parse {
                path: path.into(),
                line,
                message: "demand is not finite".into(),
            });
        }
        if row.demand_mw <= 0.0 {
            warn!(
                "{}: non-positive demand {} in slot {}",
                path.display(),
                row.demand_mw,
                row.slot
            );
        }
        last = Some(row.slot);
        out.push(row.demand_mw);
    }
    if out.is_empty() {
        return Err(ScenarioError::EmptyDemand(path.into()));
    }
    Ok(out)
}

/// Prosumer equilibrium bids for `inst`. Linear generator costs shift every
/// supply function by the same intercept and do not enter the bids, so the
/// closed form is evaluated with them removed.
pub fn prosumer_bids(inst: &Instance) -> Result<ProsumerEquilibrium, EquilibriumError> {
    let mut shifted = inst.clone();
    for g in &mut shifted.generators {
        g.a = 0.0;
    }
    equilibrium::prosumer_equilibrium(&shifted)
}

/// Clears and settles one mechanism.
pub fn run_mechanism(mechanism: Mechanism, inst: &Instance) -> Result<MarketOutcome, ScenarioError> {
    let tag = |e: String| ScenarioError::Mechanism { mechanism, message: e };
    let sol = match mechanism {
        Mechanism::Social => dispatch::social_planner(inst).map_err(|e| tag(e.to_string()))?,
        Mechanism::Pbm => {
            let eq = prosumer_bids(inst).map_err(|e| tag(e.to_string()))?;
            dispatch::prosumer_clearing(inst, &eq.alphas, &eq.beta_hats, Constraints::All)
                .map_err(|e| tag(e.to_string()))?
        }
        Mechanism::Cbm => {
            let (alphas, betas) = equilibrium::truthful_bids(inst).map_err(|e| tag(e.to_string()))?;
            dispatch::cycle_aware_clearing(inst, &alphas, &betas).map_err(|e| tag(e.to_string()))?
        }
        Mechanism::Gcd => dispatch::gcd_clearing(inst).map_err(|e| tag(e.to_string()))?.0,
    };
    settlement::settle(mechanism, &sol, inst).map_err(|e| tag(e.to_string()))
}

/// Runs every configured mechanism on the unswept instance.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Vec<MarketOutcome>, ScenarioError> {
    let demand = config.demand()?;
    let inst = config.instance(&demand, None)?;
    config.mechanisms.iter().map(|&m| run_mechanism(m, &inst)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub value: f64,
    /// Outcomes in configuration order, empty when the point failed.
    pub outcomes: Vec<MarketOutcome>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn comparison(&self) -> Comparison {
        settlement::compare(&self.outcomes).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub param: SweepParam,
    pub mechanisms: Vec<Mechanism>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Orderings between mechanisms at every point, and the monotone trends:
    /// social cost non-decreasing in `B` for the cycle-aware and prosumer
    /// markets, and non-increasing in `E` for the cycle-aware market.
    pub fn checks(&self, tol: f64) -> Vec<(usize, OrderingCheck)> {
        let mut out: Vec<(usize, OrderingCheck)> = Vec::new();
        for row in &self.rows {
            for c in row.comparison().orderings(tol) {
                out.push((row.index, c));
            }
        }
        let trends: &[Mechanism] = match self.param {
            SweepParam::B => &[Mechanism::Cbm, Mechanism::Pbm],
            SweepParam::E => &[Mechanism::Cbm],
        };
        for &m in trends {
            let costs: Vec<(usize, f64)> = self
                .rows
                .iter()
                .filter_map(|r| r.comparison().row(m).map(|c| (r.index, c.social_cost)))
                .collect();
            for w in costs.windows(2) {
                let (name, lhs, rhs) = match self.param {
                    SweepParam::B => (format!("{m} social cost non-decreasing in B"), w[0].1, w[1].1),
                    SweepParam::E => (format!("{m} social cost non-increasing in E"), w[1].1, w[0].1),
                };
                out.push((
                    w[1].0,
                    OrderingCheck {
                        name,
                        lhs,
                        rhs,
                        holds: lhs <= rhs + tol,
                    },
                ));
            }
        }
        out
    }

    pub fn failures(&self, tol: f64) -> Vec<String> {
        let mut out: Vec<String> = self
            .rows
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("point {}: {e}", r.index)))
            .collect();
        out.extend(
            self.checks(tol)
                .into_iter()
                .filter(|(_, c)| !c.holds)
                .map(|(i, c)| format!("point {i}: {} ({} vs {})", c.name, c.lhs, c.rhs)),
        );
        out
    }
}

/// Runs the configured mechanisms at every sweep point. Points run in
/// parallel; a failing point is recorded and the sweep continues.
pub fn run_sweep(config: &ScenarioConfig) -> Result<SweepResult, ScenarioError> {
    let spec = config
        .sweep
        .as_ref()
        .ok_or_else(|| ScenarioError::Config("no sweep section".into()))?;
    let demand = config.demand()?;
    let rows: Vec<SweepRow> = spec
        .values()
        .into_par_iter()
        .enumerate()
        .map(|(index, value)| {
            let result = config
                .instance(&demand, Some(value))
                .and_then(|inst| config.mechanisms.iter().map(|&m| run_mechanism(m, &inst)).collect());
            match result {
                Ok(outcomes) => SweepRow {
                    index,
                    value,
                    outcomes,
                    error: None,
                },
                Err(e) => {
                    warn!("sweep point {index} ({} = {value}) failed: {e}", spec.param.name());
                    SweepRow {
                        index,
                        value,
                        outcomes: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(SweepResult {
        param: spec.param,
        mechanisms: config.mechanisms.clone(),
        rows,
    })
}

/// Result of the feasibility screen.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub horizon: usize,
    pub issues: Vec<String>,
}

impl Validation {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Checks the configuration, the demand data and that the physical
/// constraints admit a dispatch at every sweep point.
pub fn validate(config: &ScenarioConfig) -> Result<Validation, ScenarioError> {
    let demand = config.demand()?;
    let mut issues = Vec::new();
    if let Some(t) = demand.iter().position(|d| *d <= 0.0) {
        issues.push(format!("non-positive demand in slot {}", t + 1));
    }
    let values: Vec<Option<f64>> = match &config.sweep {
        Some(s) => s.values().into_iter().map(Some).collect(),
        None => vec![None],
    };
    for v in values {
        let inst = config.instance(&demand, v)?;
        if let Err(e) = dispatch::gcd_clearing(&inst) {
            let at = v.map_or(String::new(), |v| format!(" at {v}"));
            issues.push(format!("no feasible dispatch{at}: {e}"));
        }
    }
    Ok(Validation {
        horizon: demand.len(),
        issues,
    })
}

/// Closed-form prosumer equilibrium of the configured instance and the
/// alignment verdict for every storage.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSummary {
    pub equilibrium: ProsumerEquilibrium,
    pub alignment: Vec<equilibrium::AlignmentCertificate>,
    /// Linear generator costs were removed before applying the closed form.
    pub shifted: bool,
}

pub fn equilibrium_summary(config: &ScenarioConfig) -> Result<EquilibriumSummary, ScenarioError> {
    let demand = config.demand()?;
    let inst = config.instance(&demand, None)?;
    let shifted = inst.generators.iter().any(|g| g.a != 0.0);
    let eq = prosumer_bids(&inst)?;
    let alignment = inst
        .storages
        .iter()
        .map(|s| equilibrium::alignment_condition(&demand, s.capacity_mwh))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EquilibriumSummary {
        equilibrium: eq,
        alignment,
        shifted,
    })
}
