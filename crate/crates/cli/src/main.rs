use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use osmosis_cli::commands::{self, Command, RunContext};
use osmosis_cli::config;

/// RGBD diffusion prior with physics-guided underwater restoration.
#[derive(Debug, Parser)]
#[command(name = "osmosis", version)]
struct Cli {
    command: Command,

    /// TOML config file, or a run manifest (`*_manifest.json`) to re-run.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one setting, e.g. `--set guidance.lambda_v=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for per-image work.
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    /// Sequential processing and no timestamps in manifests.
    #[arg(long)]
    deterministic: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let result = config::load(cli.config.as_deref(), &sets).and_then(|cfg| {
        let ctx = RunContext::new(cfg, cli.jobs, cli.deterministic);
        commands::run(cli.command, &ctx)
    });
    match result {
        Ok(m) => {
            let path = osmosis_cli::RunManifest::path_for(&m.config.paths.output, &m.command);
            log::info!("{} done; manifest {}", m.command, path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("osmosis: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
