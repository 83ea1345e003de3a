mod commands;
mod config;
mod error;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use error::{CliError, CliResult};

/// D-optimal sensor placement for advection–diffusion source inversion.
#[derive(Parser)]
#[command(name = "oed-dopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default `out/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic observations, noise levels and the true initial field.
    Synthesize(Common),
    /// Optimal sensor weights and thresholded design.
    Oed(Common),
    /// Objective, information gain and KL divergence of a design.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Weights CSV with a `weight` column.
        #[arg(long)]
        weights: PathBuf,
    },
    /// The optimal design against random designs of equal size.
    CompareRandom {
        #[command(flatten)]
        common: Common,
        /// Weights CSV with `weight` and optionally `active` columns.
        #[arg(long)]
        weights: PathBuf,
    },
    /// Error-versus-rank and mesh-refinement sweeps.
    Bench(Common),
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| CliError::Validation(format!("{}: {e}", common.config.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| commands::default_out(name))
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("OED_DOPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("OED_DOPT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failure(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let with = |common: &Common, name: &str, f: &dyn Fn(&ExperimentConfig, &Path) -> CliResult<()>| {
        let cfg = load(common)?;
        f(&cfg, &out_dir(common, name))
    };
    match &cli.command {
        Command::Synthesize(c) => with(c, "synthesize", &commands::synthesize),
        Command::Oed(c) => with(c, "oed", &commands::oed),
        Command::Evaluate { common, weights } => {
            with(common, "evaluate", &|cfg, out| commands::evaluate(cfg, out, weights))
        }
        Command::CompareRandom { common, weights } => {
            with(common, "compare-random", &|cfg, out| commands::compare_random(cfg, out, weights))
        }
        Command::Bench(c) => with(c, "bench", &commands::bench),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
