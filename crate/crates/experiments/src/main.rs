use std::process::ExitCode;

use blaq_experiments::config::{parse_overrides, Experiment, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

/// Loss-aware quantization experiments.
///
/// Every subcommand accepts `--config FILE` (JSON) followed by any number
/// of `--key value` overrides, e.g. `--optimizer laq --eta '[[0,0.05]]'`.
/// Exit status: 0 on success, 1 when a run's checks fail, 2 on a
/// configuration or data error.
#[derive(Parser)]
#[command(name = "blaq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trajectories on the anisotropic 2-D quadratic.
    Toy2d(Rest),
    /// Flip counts on the 3/2-power toy objective.
    ToyPow32(Rest),
    /// Train the fully-connected MNIST model.
    TrainMnist(Rest),
    /// Bound and comparison checks on random quadratics.
    TheoryCheck(Rest),
}

#[derive(Args)]
struct Rest {
    /// `--config FILE` and `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
    args: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, rest) = match cli.command {
        Command::Toy2d(r) => (Experiment::Toy2d, r.args),
        Command::ToyPow32(r) => (Experiment::ToyPow32, r.args),
        Command::TrainMnist(r) => (Experiment::TrainMnist, r.args),
        Command::TheoryCheck(r) => (Experiment::TheoryCheck, r.args),
    };
    let cfg = match parse_overrides(&rest)
        .and_then(|(file, overrides)| ExperimentConfig::load(experiment, file.as_deref(), &overrides))
    {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match blaq_experiments::run(&cfg) {
        Ok(checks) => {
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("results written to {}", cfg.output_dir.display());
            if cfg.assert && checks.iter().any(|c| !c.passed) {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
