use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metro_choice::pipeline::{run_all, run_stage, PipelineConfig, PipelineError, Stage};

#[derive(Parser, Debug)]
#[command(name = "metro-choice", version, about = "Predict metro passengers' wait/abandon choices under train delays")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fail on unknown config keys, rejected rows and inconsistent reports.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic world with ground truth.
    Synth,
    /// Parse AFC records and rebuild trips.
    Ingest,
    /// Load delay events from the table and narratives.
    Delays,
    /// Screen regular passengers and mine travel patterns.
    Mine,
    /// Find patterns hit by a delay in space and time.
    Affected,
    /// Label each affected instance wait or abandon.
    Label,
    /// Build the choice dataset.
    Featurize,
    /// Run the configured predictors.
    Predict,
    /// Score predictions and write the comparison report.
    Eval,
    /// Run ingest through eval in order.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Ingest => Stage::Ingest,
            Command::Delays => Stage::Delays,
            Command::Mine => Stage::Mine,
            Command::Affected => Stage::Affected,
            Command::Label => Stage::Label,
            Command::Featurize => Stage::Featurize,
            Command::Predict => Stage::Predict,
            Command::Eval => Stage::Eval,
            Command::All => return None,
        })
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path, cli.strict)?,
        None => {
            let mut cfg = PipelineConfig { strict: cli.strict, ..PipelineConfig::default() };
            cfg.resolve_paths(&std::env::current_dir().map_err(|source| PipelineError::Io { path: ".".into(), source })?);
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    match cli.command.stage() {
        Some(stage) => run_stage(stage, &cfg),
        None => run_all(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
