use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use smart_kit::commands::{self, Command};
use smart_kit::config::RunConfig;

/// Puzzle-solving pipeline tools: scene synthesis, question typing,
/// templates, adapter training and scoring.
#[derive(Debug, Parser)]
#[command(name = "smart-kit", version)]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 means one per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

fn resolve_config(cli: &Cli) -> smart_kit::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.resolve(cli.seed, cli.jobs)
}

fn run(cli: &Cli, cfg: &RunConfig) -> smart_kit::Result<()> {
    log::info!("resolved config: {}", cfg.to_json());
    if cfg.jobs > 0 {
        // only fails if a pool already exists, which it cannot here
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global();
    }
    commands::run(&cli.command, cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    // a config that does not validate is a bad invocation, like a bad flag
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
