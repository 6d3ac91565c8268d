use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqcons::Error;

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "seqcons", version, about = "Latent Gaussian model fits with sequential consensus")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "SEQCONS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write its data tables and truth.
    Simulate(commands::SimulateArgs),
    /// Fit a model to data as a whole or sequentially.
    Fit(commands::FitArgs),
    /// Compare two result files.
    Compare(commands::CompareArgs),
    /// Fit full, SC and SCP and report timings and differences.
    Bench(commands::BenchArgs),
}

/// 2 for bad input, 3 for numerical failure, 4 for I/O.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Step { source, .. } => exit_code(source),
        Error::Io(_) => 4,
        Error::Config { .. } | Error::Data(_) | Error::Partition(_) | Error::InvalidEffect(_) | Error::Domain(_) | Error::Results(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a).map(|_| a.out.clone()),
        Command::Fit(a) => commands::fit(a).map(|_| a.out.clone()),
        Command::Compare(a) => commands::compare_cmd(a).map(|_| a.out.clone()),
        Command::Bench(a) => commands::bench(a).map(|_| a.out.clone()),
    };
    match result {
        Ok(out) => {
            println!("wrote {}", out.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
