use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pigpvae_cli::{cmd_evaluate, cmd_experiment, cmd_generate, cmd_synth, cmd_train, Case, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "pigpvae", version, about = "Physics-informed generative models for temperature curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment cells run in parallel, at most this many at once.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured dataset as CSV.
    Synth,
    /// Train one model and save a checkpoint.
    Train,
    /// Sample curves from a checkpoint.
    Generate,
    /// Score a checkpoint against the data and export figure tables.
    Evaluate,
    /// Reproduce a results table over modes, models and seeds.
    Experiment {
        #[arg(long, value_enum)]
        case: Option<Case>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn,pigpvae_cli=info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let overrides = Overrides {
        output_dir: cli.output_dir.clone(),
        seed: cli.seed,
        case: match cli.command {
            Command::Experiment { case } => case,
            _ => None,
        },
    };
    let result = RunConfig::resolve(cli.config.as_deref(), &overrides).and_then(|cfg| match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Generate => cmd_generate(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Experiment { .. } => cmd_experiment(&cfg, cli.workers),
    });
    match result {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
