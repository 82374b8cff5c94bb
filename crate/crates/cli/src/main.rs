//! `puncto`: train, inspect, and apply the point-cloud encoder from one
//! binary. Every subcommand prints a single summary JSON line on success;
//! failures print an error JSON line on stderr and exit 2 (bad config) or
//! 1 (runtime).

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{load_config, CliError, CliResult, LoadedConfig, RunConfig};

#[derive(Parser)]
#[command(name = "puncto", version, about = "Point-cloud encoder pipeline")]
struct Cli {
    /// JSON run configuration; sections drive the subcommands
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Where artifacts land (overrides the config's output_dir)
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Run seed (overrides the config's seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic parameter count for a scale preset
    Params {
        /// Scale name: Ti, S, B, L, g, or nano
        #[arg(long)]
        scale: Option<String>,
    },
    /// Contrastive training against cached teacher embeddings
    Train,
    /// Analytic vs central-difference gradients on a synthetic batch
    Gradcheck {
        /// Scale name (default nano)
        #[arg(long)]
        scale: Option<String>,
        /// Finite-difference step (default 1e-5)
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Embed clouds into a .u3de cache
    Embed,
    /// Zero-shot classification against class prompt vectors
    Classify,
    /// Few-shot linear probe over frozen embeddings
    Probe,
    /// Part-segmentation head training and mIoU evaluation
    Partseg,
    /// Gradient-ascent color painting toward a target vector
    Paint,
    /// Build or load a shape index and run queries
    Retrieve,
}

/// An invalid PUNCTO_THREADS is a config error; a valid one sizes the global
/// worker pool before any compute.
fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("PUNCTO_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config {
            path: None,
            message: format!("PUNCTO_THREADS '{raw}' is not a positive integer"),
        }
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    init_threads()?;
    let mut loaded = match &cli.config {
        Some(path) => load_config(path)?,
        None => LoadedConfig { run: RunConfig::default(), base: PathBuf::from(".") },
    };
    if let Some(seed) = cli.seed {
        loaded.run.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        loaded.run.output_dir = dir.clone();
    }
    let out_dir = commands::out_dir_of(&loaded);
    match &cli.command {
        Command::Params { scale } => commands::params(&loaded, scale.as_deref()),
        Command::Train => commands::train(&loaded, &out_dir),
        Command::Gradcheck { scale, epsilon } => {
            commands::gradcheck(&loaded, &out_dir, scale.as_deref(), *epsilon)
        }
        Command::Embed => commands::embed(&loaded, &out_dir),
        Command::Classify => commands::classify(&loaded, &out_dir),
        Command::Probe => commands::probe(&loaded, &out_dir),
        Command::Partseg => commands::partseg(&loaded, &out_dir),
        Command::Paint => commands::paint_cmd(&loaded, &out_dir),
        Command::Retrieve => commands::retrieve_cmd(&loaded, &out_dir),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}
