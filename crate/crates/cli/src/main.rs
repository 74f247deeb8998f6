//! `tdvcl` — run continual-learning experiments from a JSON config and
//! drive the invariant check suites.
//!
//! Exit codes: 0 ok, 1 check failure or runtime error, 2 usage/config error.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use tdvcl_core::checks;
use tdvcl_core::error::CoreError;

#[derive(Parser)]
#[command(name = "tdvcl", version, about = "Variational continual-learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed instead of the config's seeds list.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run one invariant suite: coefficients, propositions, gradients, oracle.
    Check {
        suite: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed_override } => {
            let parsed = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            match runner::run(&parsed, out.as_deref(), seed_override) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("run failed: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Check { suite } => match checks::run_suite(&suite) {
            Ok(outcomes) => {
                let mut ok = true;
                for o in &outcomes {
                    println!("{}", serde_json::to_string(o).expect("serializable"));
                    ok &= o.passed;
                }
                println!(
                    "{}",
                    serde_json::json!({
                        "suite": suite,
                        "passed": ok,
                        "checks": outcomes.len(),
                    })
                );
                if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(CoreError::Contract(msg)) => {
                eprintln!("usage error: {msg}");
                ExitCode::from(2)
            }
            Err(e) => {
                eprintln!("check failed: {e}");
                ExitCode::from(1)
            }
        },
    }
}
