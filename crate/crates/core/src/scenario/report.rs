//! Report files. Every file is written in full by a single writer, and
//! numbers use the shortest round-trip formatting, so identical results give
//! byte-identical files.

use std::path::{Path, PathBuf};

use super::{ScenarioError, SweepResult};
use crate::dispatch::Mechanism;
use crate::settlement::MarketOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    /// Whitespace-delimited series with `#` header lines.
    Plotdata,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.into(),
        source,
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), ScenarioError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| ScenarioError::Io {
        path: path.into(),
        source: std::io::Error::other(e),
    };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ScenarioError::Io {
        path: path.into(),
        source: e.into_error(),
    })?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_dat(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), ScenarioError> {
    let mut text = format!("# {}\n", header.join(" "));
    for row in rows {
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

type Metric = fn(&MarketOutcome) -> f64;

fn num(v: f64) -> String {
    format!("{v}")
}

fn dispatch_rows(outcome: &MarketOutcome) -> Vec<Vec<String>> {
    let d = &outcome.dispatch;
    (0..outcome.demand.len())
        .map(|t| {
            let gen: f64 = d.g.iter().map(|g| g[t]).sum();
            let sto: f64 = d.u.iter().map(|u| u[t]).sum();
            vec![
                num((t + 1) as f64),
                num(outcome.demand[t]),
                num(gen),
                num(sto),
                num(d.lambda[t]),
            ]
        })
        .collect()
}

fn theta_rows(outcome: &MarketOutcome, storage: usize) -> Vec<Vec<String>> {
    let d = &outcome.dispatch;
    let theta = d.theta.as_ref().map(|t| t[storage].clone()).unwrap_or_default();
    d.nu[storage]
        .iter()
        .zip(&theta)
        .enumerate()
        .map(|(k, (nu, th))| vec![num((k + 1) as f64), num(*nu), num(*th)])
        .collect()
}

const DISPATCH_HEADER: [&str; 5] = ["slot", "demand", "gen_total", "storage_total", "lambda"];
const SUMMARY_HEADER: [&str; 6] = [
    "mechanism",
    "social_cost",
    "generation_cost",
    "cycling_cost",
    "storage_profit",
    "converged",
];

fn summary(outcome: &MarketOutcome) -> Vec<String> {
    vec![
        outcome.mechanism.to_string(),
        num(outcome.social_cost),
        num(outcome.generation_cost),
        num(outcome.cycling_cost),
        num(outcome.storage_profit()),
        outcome.dispatch.converged.to_string(),
    ]
}

/// Per-mechanism dispatch files (and cycle prices for the cycle-aware market)
/// with `suffix` appended to the file stem.
fn emit_dispatch(
    outcomes: &[MarketOutcome],
    dir: &Path,
    suffix: &str,
    format: OutputFormat,
) -> Result<Vec<PathBuf>, ScenarioError> {
    let mut written = Vec::new();
    for o in outcomes {
        let rows = dispatch_rows(o);
        let path = match format {
            OutputFormat::Csv => {
                let path = dir.join(format!("dispatch_{}{suffix}.csv", o.mechanism));
                write_csv(&path, &DISPATCH_HEADER, &rows)?;
                path
            }
            OutputFormat::Plotdata => {
                let path = dir.join(format!("dispatch_{}{suffix}.dat", o.mechanism));
                write_dat(&path, &DISPATCH_HEADER.map(String::from), &rows)?;
                path
            }
        };
        written.push(path);
        if o.mechanism == Mechanism::Cbm {
            for i in 0..o.dispatch.u.len() {
                let rows = theta_rows(o, i);
                let header = ["cycle", "nu", "theta"];
                let path = match format {
                    OutputFormat::Csv => {
                        let path = dir.join(format!("theta_{i}{suffix}.csv"));
                        write_csv(&path, &header, &rows)?;
                        path
                    }
                    OutputFormat::Plotdata => {
                        let path = dir.join(format!("theta_{i}{suffix}.dat"));
                        write_dat(&path, &header.map(String::from), &rows)?;
                        path
                    }
                };
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Writes the outcomes of a single run: `outcomes.csv`, one dispatch file per
/// mechanism and the cycle prices of the cycle-aware market.
pub fn emit_run(outcomes: &[MarketOutcome], dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>, ScenarioError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rows: Vec<Vec<String>> = outcomes.iter().map(summary).collect();
    let path = match format {
        OutputFormat::Csv => {
            let path = dir.join("outcomes.csv");
            write_csv(&path, &SUMMARY_HEADER, &rows)?;
            path
        }
        OutputFormat::Plotdata => {
            let path = dir.join("outcomes.dat");
            write_dat(&path, &SUMMARY_HEADER.map(String::from), &rows)?;
            path
        }
    };
    let mut written = vec![path];
    written.extend(emit_dispatch(outcomes, dir, "", format)?);
    Ok(written)
}

/// Writes a sweep. CSV mode gives `sweep.csv` plus dispatch files per point
/// (suffix `_<index>`); plot-data mode gives one series file per panel
/// (`<param>_social_cost.dat`, `<param>_cycling_cost.dat`,
/// `<param>_storage_profit.dat`) with one column per mechanism.
pub fn emit_sweep(result: &SweepResult, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>, ScenarioError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            let mut rows = Vec::new();
            for row in &result.rows {
                if row.outcomes.is_empty() {
                    for m in &result.mechanisms {
                        let nan = num(f64::NAN);
                        rows.push(vec![
                            num(row.value),
                            m.to_string(),
                            nan.clone(),
                            nan.clone(),
                            nan.clone(),
                            nan,
                            "false".into(),
                        ]);
                    }
                }
                for o in &row.outcomes {
                    let mut r = vec![num(row.value)];
                    r.extend(summary(o));
                    rows.push(r);
                }
            }
            let path = dir.join("sweep.csv");
            let mut header = vec!["param_value"];
            header.extend(SUMMARY_HEADER);
            write_csv(&path, &header, &rows)?;
            written.push(path);
            for row in &result.rows {
                written.extend(emit_dispatch(&row.outcomes, dir, &format!("_{}", row.index), format)?);
            }
        }
        OutputFormat::Plotdata => {
            let panels: [(&str, Metric); 3] = [
                ("social_cost", |o| o.social_cost),
                ("cycling_cost", |o| o.cycling_cost),
                ("storage_profit", |o| o.storage_profit()),
            ];
            for (name, value) in panels {
                let mut header = vec![result.param.name().to_string()];
                header.extend(result.mechanisms.iter().map(|m| m.to_string()));
                let rows: Vec<Vec<String>> = result
                    .rows
                    .iter()
                    .map(|row| {
                        let mut r = vec![num(row.value)];
                        for m in &result.mechanisms {
                            let v = row.outcomes.iter().find(|o| o.mechanism == *m).map_or(f64::NAN, value);
                            r.push(num(v));
                        }
                        r
                    })
                    .collect();
                let path = dir.join(format!("{}_{name}.dat", result.param.name()));
                write_dat(&path, &header, &rows)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
