//! Command-line surface over the mode-sleuth library: simulation, batch
//! fitting, streaming tracking, model comparison and spectra, all driven by
//! a single seed for reproducible runs.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage error.

mod commands;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mode-sleuth",
    version,
    about = "Inference of dominant modes for linear stochastic processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a builtin kernel, a mode model or a grid and write CSV.
    Simulate(commands::simulate::SimulateArgs),
    /// Batch maximum-likelihood fit of a mode family to CSV data.
    Fit(commands::fit::FitArgs),
    /// Stream records through the discounted-evidence tracker.
    Stream(commands::stream::StreamArgs),
    /// Bayesian comparison over a grid of mode-count candidates.
    Compare(commands::compare::CompareArgs),
    /// Hann-windowed periodogram and log-log slope report.
    Spectrum(commands::spectrum::SpectrumArgs),
}

fn main() {
    if let Ok(threads) = std::env::var("MODE_SLEUTH_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                mode_sleuth::exec::configure_threads(n);
            }
            _ => {
                eprintln!("warning: ignoring invalid MODE_SLEUTH_THREADS={threads:?}");
            }
        }
    }

    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => commands::simulate::run(args),
        Command::Fit(args) => commands::fit::run(args),
        Command::Stream(args) => commands::stream::run(args),
        Command::Compare(args) => commands::compare::run(args),
        Command::Spectrum(args) => commands::spectrum::run(args),
    };
    match outcome {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(commands::exit_code(&err));
        }
    }
}
