//! `uasim`: turns a tabular interaction log into simulated user agents,
//! one pipeline stage per subcommand. Stages chain through digest-checked
//! manifests under the configured output root; logs go to stderr, plans
//! and reports to stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uasim_cli::config::load_config;
use uasim_cli::errors::CliError;
use uasim_cli::stages::{run_stage, StageCtx};

#[derive(Parser)]
#[command(
    name = "uasim",
    version,
    about = "Build and evaluate simulated movie-rating agents from an interaction log"
)]
struct Cli {
    /// Run configuration file (TOML; ${VAR} expands from the environment).
    #[arg(short, long, global = true, default_value = "run.toml")]
    config: PathBuf,

    /// Print what the stage would read, write, and assume, then exit.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the log, select the cohort, split histories in time, build item cards
    Ingest,
    /// Write behavioral profiles and first-person memories via the chat backend
    Distill,
    /// Cluster profile embeddings into personas
    Cluster,
    /// Pack train-side memories into the retrieval index
    Index,
    /// Emit fine-tuning datasets and trainer configs per adapter
    Datasets,
    /// Replay held-out prompts against the trained endpoints
    Simulate,
    /// Score transcripts into error and unrelatedness metrics
    Evaluate,
    /// Render the cross-adapter comparison, pooled score, and size chart
    Report,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Distill => "distill",
            Command::Cluster => "cluster",
            Command::Index => "index",
            Command::Datasets => "datasets",
            Command::Simulate => "simulate",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(&cli.config)?;
    let ctx = StageCtx::new(config, cli.dry_run);
    run_stage(cli.command.stage(), &ctx)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
