//! `dire-sim`: runs simulation scenarios and checks written reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dire_core::sim::report::check_report_dir;
use dire_core::sim::workload::estimate_match_rate;
use dire_core::sim::{emit_report, CheckResult, SimConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dire-sim", version, about = "Federated service registry simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs a scenario and prints its summary.
    Run {
        /// Scenario file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the report files into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluates the formula checks of a written report.
    Check {
        /// Directory written by `run --out`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Estimates the match rate of a scenario's generated workload.
    WorkloadStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2_000)]
        services: usize,
        #[arg(long, default_value_t = 20_000)]
        interests: usize,
    },
}

fn print_checks(checks: &[CheckResult]) -> bool {
    for c in checks {
        println!(
            "{} {} {}: expected {:.1}, measured {} (tolerance {})",
            if c.pass { "PASS" } else { "FAIL" },
            c.check.federation,
            c.check.quantity.as_str(),
            c.expected,
            c.measured,
            c.check.tolerance
        );
    }
    checks.iter().all(|c| c.pass)
}

fn load(path: &PathBuf) -> Result<SimConfig, String> {
    SimConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let report = dire_core::sim::run(cfg).map_err(|e| e.to_string())?;
            print!("{}", report.summary());
            if let Some(dir) = out {
                emit_report(&report, &dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                println!("report written to {}", dir.display());
            }
            Ok(true)
        }
        Command::Check { report } => {
            let checks = check_report_dir(&report).map_err(|e| format!("{}: {e}", report.display()))?;
            if checks.is_empty() {
                println!("no formula checks in {}", report.display());
            }
            Ok(print_checks(&checks))
        }
        Command::WorkloadStats {
            config,
            services,
            interests,
        } => {
            let cfg = load(&config)?;
            let spec = cfg
                .workload
                .as_ref()
                .ok_or_else(|| format!("{}: no [workload] table", config.display()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let measured = estimate_match_rate(&mut rng, spec, services, interests);
            println!("expected match rate: {:.6}", spec.expected_match_rate());
            println!("sampled match rate:  {measured:.6} ({services} services x {interests} interests)");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
