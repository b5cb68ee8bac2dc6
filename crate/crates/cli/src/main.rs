use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pipegrad",
    about = "Declarative train/tune/resample runs and the runtime benchmark harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for resampling/tuning (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the config's data source with a synthetic task.
    #[arg(long, global = true, value_parser = ["regr", "multimodal"])]
    synth: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured pipeline and write the model plus training logs.
    Train { config: PathBuf },
    /// Random-search tuning over the declared space.
    Tune { config: PathBuf },
    /// Resample the pipeline and emit a score table (and optional ROC).
    Resample { config: PathBuf },
    /// Runtime-overhead benchmark: raw loop vs framework per grid cell.
    Bench { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, config) = match &cli.command {
        Command::Train { config } => ("train", config),
        Command::Tune { config } => ("tune", config),
        Command::Resample { config } => ("resample", config),
        Command::Bench { config } => ("bench", config),
    };
    match pipegrad_cli::commands::run(
        command,
        config,
        cli.seed,
        cli.threads,
        cli.out.as_deref(),
        cli.synth.as_deref(),
    ) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("{failed} run(s) failed or were skipped");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
