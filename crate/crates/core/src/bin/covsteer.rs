use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covsteer::cli::{self, CliError, MonteCarloArgs, PropagateArgs, SolveArgs};
use covsteer::conic::SolverSettings;
use covsteer::SteeringOptions;

/// Covariance steering for Markov jump linear systems.
#[derive(Parser)]
#[command(name = "covsteer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate moments under a policy (zero policy by default).
    Propagate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a steering policy.
    Solve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        /// Also enforce state chance constraints at the terminal step.
        #[arg(long)]
        include_terminal_cc: Option<bool>,
    },
    /// Validate a policy by closed-loop simulation.
    Montecarlo {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to policy.json in the output directory.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every sample to samples.csv.
        #[arg(long)]
        raw_samples: bool,
    },
    /// Render a text summary and SVG figures from existing artifacts.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Tuning {
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1e2)]
    alpha: f64,
    #[arg(long, default_value_t = 1.5)]
    eta: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let manifest = match cli.command {
        Command::Propagate { model, policy, out } => cli::cmd_propagate(&PropagateArgs { model, policy, out })?,
        Command::Solve { model, out, tuning, include_terminal_cc } => {
            let options = SteeringOptions {
                tol: tuning.tol,
                alpha_init: tuning.alpha,
                eta: tuning.eta,
                max_iter: tuning.max_iter,
                solver: SolverSettings::default(),
                ..SteeringOptions::default()
            };
            cli::cmd_solve(&SolveArgs { model, out, options, include_terminal_cc })?
        }
        Command::Montecarlo { model, policy, out, samples, seed, raw_samples } => {
            cli::cmd_montecarlo(&MonteCarloArgs { model, policy, out, samples, seed, raw_samples })?
        }
        Command::Report { out } => cli::cmd_report(&out)?,
    };
    println!("{}: {} artifacts in {}", manifest.command, manifest.artifacts.len(), manifest.out_dir);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("covsteer: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
