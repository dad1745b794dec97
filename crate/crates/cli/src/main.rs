use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use viji_cli::bench::{run_suite, Status};
use viji_cli::config::{load_run, load_suite, SuiteConfig};
use viji_core::verify::{run_suites, CheckOptions};

#[derive(Parser)]
#[command(name = "viji", version, about = "Second-order VI solvers with inexact Jacobians")]
struct Cli {
    /// Directory for CSV traces and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one problem/solver pair from a JSON config.
    Run { config: PathBuf },
    /// Run a suite of methods; without a path, the built-in comparison.
    Bench { suite: Option<PathBuf> },
    /// Run the invariant suites.
    Check {
        /// Only suites whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Scale applied to the measured inexactness in the Taylor-bound suite.
        #[arg(long, default_value_t = 1.0, hide = true)]
        taylor_delta_scale: f64,
    },
}

/// Exit code 2 marks invalid input; 1 marks a failed run or check.
enum Failure {
    Invalid(anyhow::Error),
    Failed(String),
}

fn apply_seed(mut suite: SuiteConfig, seed: Option<u64>) -> SuiteConfig {
    if let Some(s) = seed {
        suite.seed = s;
        suite.problem = suite.problem.with_seed(s);
    }
    suite
}

fn bench(suite: SuiteConfig, cli: &Cli, single: bool) -> Result<(), Failure> {
    let suite = apply_seed(suite, cli.seed);
    suite.validate().map_err(Failure::Invalid)?;
    let (manifest, _) = run_suite(&suite, Some(&cli.out_dir)).map_err(|e| Failure::Failed(format!("{e:#}")))?;
    for m in &manifest.methods {
        match m.status {
            Status::Ok => println!(
                "{}: {} iterations, {} = {}, {} operator + {} JVP evaluations{}",
                m.label,
                m.iterations,
                manifest.metric_name,
                m.final_metric.map_or("n/a".into(), |v| format!("{v:.6e}")),
                m.op_evals,
                m.jvp_evals,
                if suite.timing { format!(", {:.2}s", m.wall_s) } else { String::new() }
            ),
            Status::Failed => eprintln!("{}: failed: {}", m.label, m.error.as_deref().unwrap_or("")),
        }
    }
    if !single {
        println!("manifest: {}", cli.out_dir.join("manifest.json").display());
    }
    if manifest.all_ok() {
        Ok(())
    } else {
        Err(Failure::Failed("one or more methods failed".into()))
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { config } => {
            let run = load_run(config).map_err(Failure::Invalid)?;
            bench(run.into_suite(), cli, true)
        }
        Command::Bench { suite } => {
            let suite = match suite {
                Some(p) => load_suite(p).map_err(Failure::Invalid)?,
                None => SuiteConfig::default(),
            };
            bench(suite, cli, false)
        }
        Command::Check {
            filter,
            taylor_delta_scale,
        } => {
            let opts = CheckOptions {
                seed: cli.seed.unwrap_or(0),
                taylor_delta_scale: *taylor_delta_scale,
            };
            let reports = run_suites(filter.as_deref(), &opts).map_err(|e| Failure::Invalid(e.into()))?;
            let mut ok = true;
            for r in &reports {
                println!(
                    "{} {:<10} {} ({:.2}s)",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail,
                    r.elapsed_s
                );
                ok &= r.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(Failure::Failed("invariant check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
