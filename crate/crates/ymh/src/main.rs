use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ymh::runner::{run, Experiment, RunConfig};
use ymh::Error;

#[derive(Parser)]
#[command(name = "ymh", version, about = "Desk-scale experiments for the U(1) lattice Yang-Mills-Higgs model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Domain and blocking descriptor, lattice-animal counts.
    Geometry(Args),
    /// Proca spectrum and covariance decay scan.
    Proca(Args),
    /// Metropolis correlations and decay fit.
    Simulate(Args),
    /// Truncated cluster expansion of a weight table.
    Expand(Args),
    /// Brute-force decomposition check and polymer weights.
    Oracle(Args),
    /// The full acceptance suite.
    Verify(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn status(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Guard(_) => 3,
        Error::Numerical(_) | Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match cli.command {
        Command::Geometry(a) => (Experiment::Geometry, a),
        Command::Proca(a) => (Experiment::Proca, a),
        Command::Simulate(a) => (Experiment::Simulate, a),
        Command::Expand(a) => (Experiment::Expand, a),
        Command::Oracle(a) => (Experiment::Oracle, a),
        Command::Verify(a) => (Experiment::Verify, a),
    };
    let result = RunConfig::load(experiment, &args.config).and_then(|mut cfg| {
        if let Some(out) = args.out {
            cfg.out = out;
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        run(&cfg)
    });
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("artifacts in {}", outcome.out_dir.display());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("in-run checks failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(status(&e))
        }
    }
}
