//! Command-line pipeline around `healthdyn-core`: configuration, artifact
//! formats, stage orchestration and run manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

pub use commands::Command;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "healthdyn",
    version,
    about = "Health dynamics and life-cycle labor supply pipeline"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=7` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

/// Run one subcommand and write its manifest.
pub fn run(cli: &Cli) -> CliResult<manifest::Manifest> {
    let cfg = config::RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    let mut ctx = commands::Context::new(cfg)?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::io(&ctx.out, e))?;
    let start = Instant::now();
    let outcome = pool.install(|| commands::run(&mut ctx, &cli.command))?;
    let wall_seconds = start.elapsed().as_secs_f64();
    let m = manifest::Manifest {
        subcommand: cli.command.name().into(),
        seed: ctx.seed,
        threads,
        config: ctx.cfg.entries(),
        inputs: manifest::hash_paths(&ctx.out, &outcome.inputs)?,
        outputs: manifest::hash_paths(&ctx.out, &outcome.outputs)?,
        wall_seconds,
        identical_to_previous: None,
    };
    manifest::record(&ctx.out, m)
}
