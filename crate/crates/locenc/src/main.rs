use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use locenc::cli::{cmd_analyze, cmd_eval, cmd_generate, cmd_train, cmd_viz, RunConfig};
use locenc::Error;

#[derive(Parser)]
#[command(name = "locenc", version, about = "Location-encoder training, evaluation, and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic POI dataset as CSV.
    Generate(CommonArgs),
    /// Train a model and write a checkpoint.
    Train(CommonArgs),
    /// Evaluate a checkpoint (or the random baseline) on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate a baseline instead of a checkpoint ("random").
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Ripley's K curves and distribution grouping per type.
    Analyze(CommonArgs),
    /// Response maps and embedding cluster map from a checkpoint.
    Viz {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> locenc::Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    cfg.apply_overrides(common.seed, common.out.clone());
    Ok(cfg)
}

fn run(cli: Cli) -> locenc::Result<()> {
    match cli.command {
        Command::Generate(common) => cmd_generate(&load_config(&common)?),
        Command::Train(common) => cmd_train(&load_config(&common)?),
        Command::Eval { common, checkpoint, baseline } => {
            let baseline_random = match baseline.as_deref() {
                None => false,
                Some("random") => true,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown baseline '{other}'; only 'random' is supported"
                    )))
                }
            };
            cmd_eval(&load_config(&common)?, checkpoint.as_deref(), baseline_random)
        }
        Command::Analyze(common) => cmd_analyze(&load_config(&common)?),
        Command::Viz { common, checkpoint } => cmd_viz(&load_config(&common)?, &checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
