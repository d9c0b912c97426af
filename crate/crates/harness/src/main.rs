use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wc4dvar::{run, Command, ExperimentConfig, HarnessError, Scale};

#[derive(Parser)]
#[command(name = "wc4dvar", version, about = "Sensor placement experiments for weak-constraint 4D-Var")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Criterion values by dense evaluation, SLQ and XNysTrace.
    EstimateEig(RunArgs),
    /// Sensor selection with random and exhaustive baselines.
    PlaceSensors(RunArgs),
    /// MAP estimate with and without the forecast-prior preconditioner.
    Assimilate(RunArgs),
    /// Strong-constraint criterion on weak-constraint designs.
    GapStudy(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
}

fn execute(command: Command, args: &RunArgs) -> Result<(), HarnessError> {
    let cfg = ExperimentConfig::load(&args.config, args.seed, args.scale)?;
    let outcome = run(command, &cfg, &args.out)?;
    println!(
        "{} finished; results in {} (config {})",
        command.name(),
        args.out.display(),
        &outcome.record.config_hash[..12]
    );
    match outcome.deferred {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Cmd::EstimateEig(a) => (Command::EstimateEig, a),
        Cmd::PlaceSensors(a) => (Command::PlaceSensors, a),
        Cmd::Assimilate(a) => (Command::Assimilate, a),
        Cmd::GapStudy(a) => (Command::GapStudy, a),
    };
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
