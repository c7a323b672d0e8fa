use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnfir_cli::commands::{cmd_bench, cmd_plant, cmd_simulate, cmd_train, cmd_verify, cmd_vrft, Context};
use pnfir_cli::config::RunConfig;
use pnfir_cli::CliError;

/// Passive NFIR identification, synthesis and verification.
#[derive(Parser)]
#[command(name = "pnfir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe the plant open loop and write the batches.
    Plant(Common),
    /// Build ideal-controller datasets from the probe data.
    Vrft(Common),
    /// Train every configured case.
    Train(Common),
    /// Check the passivity of trained operators.
    Verify(Common),
    /// Run closed-loop tracking simulations.
    Simulate(Common),
    /// Time synthesis over a grid of filter orders and horizons.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (args, f): (&Common, fn(&Context) -> Result<String, CliError>) = match &cli.command {
        Command::Plant(a) => (a, cmd_plant),
        Command::Vrft(a) => (a, cmd_vrft),
        Command::Train(a) => (a, cmd_train),
        Command::Verify(a) => (a, cmd_verify),
        Command::Simulate(a) => (a, cmd_simulate),
        Command::Bench(a) => (a, cmd_bench),
    };
    let cfg = RunConfig::load(&args.config)?;
    let ctx = Context::new(cfg, args.out.clone(), args.seed)?;
    f(&ctx)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
