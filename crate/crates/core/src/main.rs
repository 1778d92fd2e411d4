use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cyclemarket::scenario::{self, OutputFormat, ScenarioConfig};
use cyclemarket::selftest;
use cyclemarket::settlement;

/// Orderings are checked with this absolute tolerance.
const ORDERING_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "cyclemarket",
    version,
    about = "Multi-interval market clearing with cycle-aware storage"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory, overriding `out_dir` in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed, overriding `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fail when the mechanism orderings or sweep trends are violated.
    #[arg(long, global = true)]
    check_orderings: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Plotdata,
}

#[derive(Subcommand)]
enum Command {
    /// Clear every configured mechanism once and write the reports.
    Run { config: PathBuf },
    /// Run the configured parameter sweep.
    Sweep { config: PathBuf },
    /// Print the closed-form prosumer equilibrium and the alignment verdict.
    Equilibrium { config: PathBuf },
    /// Check the configuration and the feasibility of every dispatch it implies.
    Validate { config: PathBuf },
    /// Run the built-in invariant suites.
    Selftest,
}

fn load(cli: &Cli, path: &Path) -> Result<ScenarioConfig> {
    let mut config = ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn format(cli: &Cli) -> OutputFormat {
    match cli.format {
        Format::Csv => OutputFormat::Csv,
        Format::Plotdata => OutputFormat::Plotdata,
    }
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { config } => {
            let config = load(cli, config)?;
            let outcomes = scenario::run_scenario(&config)?;
            let files = scenario::emit_run(&outcomes, &config.out_dir, format(cli))?;
            for o in &outcomes {
                println!(
                    "{}: social cost {:.6}, cycling cost {:.6}, storage profit {:.6}, converged {}",
                    o.mechanism,
                    o.social_cost,
                    o.cycling_cost,
                    o.storage_profit(),
                    o.dispatch.converged
                );
            }
            println!("wrote {} files to {}", files.len(), config.out_dir.display());
            if cli.check_orderings {
                let failed: Vec<_> = settlement::compare(&outcomes)?
                    .orderings(ORDERING_TOL)
                    .into_iter()
                    .filter(|c| !c.holds)
                    .collect();
                for c in &failed {
                    eprintln!("ordering violated: {} ({} vs {})", c.name, c.lhs, c.rhs);
                }
                return Ok(failed.is_empty());
            }
            Ok(true)
        }
        Command::Sweep { config } => {
            let config = load(cli, config)?;
            let result = scenario::run_sweep(&config)?;
            let files = scenario::emit_sweep(&result, &config.out_dir, format(cli))?;
            println!("{} sweep: {} points", result.param.name(), result.rows.len());
            println!("wrote {} files to {}", files.len(), config.out_dir.display());
            if cli.check_orderings {
                let failures = result.failures(ORDERING_TOL);
                for f in &failures {
                    eprintln!("{f}");
                }
                return Ok(failures.is_empty());
            }
            Ok(result.rows.iter().all(|r| r.error.is_none()))
        }
        Command::Equilibrium { config } => {
            let config = load(cli, config)?;
            let summary = scenario::equilibrium_summary(&config)?;
            let eq = &summary.equilibrium;
            if summary.shifted {
                println!("note: linear generator costs do not enter the bids and were removed");
            }
            println!("alpha = {:?}", eq.alphas);
            println!("beta_hat = {:?}", eq.beta_hats);
            println!("delta = {}", eq.delta);
            println!("lambda = {:?}", eq.lambda);
            for (i, cert) in summary.alignment.iter().enumerate() {
                let verdict = if cert.holds { "holds" } else { "fails" };
                println!(
                    "storage {i}: alignment {verdict} (residual {:e}, {} pieces, enumeration {})",
                    cert.residual,
                    cert.matrices.len(),
                    if cert.enumeration_complete {
                        "complete"
                    } else {
                        "truncated"
                    }
                );
            }
            Ok(true)
        }
        Command::Validate { config } => {
            let config = load(cli, config)?;
            let report = scenario::validate(&config)?;
            if report.ok() {
                println!("ok: {} slots, every dispatch is feasible", report.horizon);
            }
            for issue in &report.issues {
                println!("issue: {issue}");
            }
            Ok(report.ok())
        }
        Command::Selftest => {
            let results = selftest::run(cli.seed.unwrap_or(0));
            for r in &results {
                println!("{r}");
            }
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                let text: String = results.iter().map(|r| format!("{r}\n")).collect();
                std::fs::write(dir.join("selftest.txt"), text)?;
            }
            Ok(results.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
