//! Command-line driver for the contrastive pipeline. The stages run in
//! order — preprocess, train, embed, probe, cluster, report — each one
//! reading the previous stage's artifacts from the output directory (or
//! explicit paths) and writing its own.
//!
//! Exit codes: 0 on success, 2 for input or configuration errors, 3 when
//! a computation leaves the reals.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "borealis",
    version,
    about = "Self-supervised contrastive representation learning for auroral imagery",
    after_help = "Stages read and write artifacts under --out-dir (default `artifacts`).\n\
                  A run is fully determined by its configuration and --seed: rerunning\n\
                  any stage on identical inputs rewrites identical bytes."
)]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Base seed for every stochastic stage.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,

    /// Directory artifacts are written to and read from.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the normalized dataset cache from image files or the
    /// synthetic generator.
    Preprocess(PreprocessArgs),
    /// Train the encoder and projection head contrastively on a cache.
    Train(TrainArgs),
    /// Embed every cached record with a trained checkpoint.
    Embed(EmbedArgs),
    /// Score embeddings with a linear probe under cross-validation.
    Probe(ProbeArgs),
    /// Sweep k-means over a k range and score each k by mean silhouette.
    Cluster(ClusterArgs),
    /// Collate the probe and cluster summaries into one report.
    Report,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory of grayscale PNG/PGM images.
    #[arg(long, value_name = "DIR", requires = "labels")]
    images: Option<PathBuf>,

    /// CSV of `filename,label` rows for --images.
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,

    /// Generate a synthetic dataset with this many images per class.
    #[arg(long, value_name = "N", conflicts_with = "images")]
    synthetic: Option<usize>,

    /// Cache file to write (default `<out-dir>/dataset.crds`).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset cache to train on (default `<out-dir>/dataset.crds`).
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,

    /// Checkpoint file to write (default `<out-dir>/checkpoint.crck`).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Dataset cache to embed (default `<out-dir>/dataset.crds`).
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,

    /// Trained checkpoint (default `<out-dir>/checkpoint.crck`).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Embedding file to write (default `<out-dir>/embeddings.crem`).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Embedding file to score (default `<out-dir>/embeddings.crem`).
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Embedding file to cluster (default `<out-dir>/embeddings.crem`).
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,

    /// Smallest k in the sweep (default from config, 3).
    #[arg(long, value_name = "K")]
    k_min: Option<usize>,

    /// Largest k in the sweep (default from config, 15).
    #[arg(long, value_name = "K")]
    k_max: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load_config(cli.config.as_deref())?.resolve(cli.seed, cli.out_dir);
    match cli.command {
        Command::Preprocess(args) => {
            commands::preprocess(&cfg, args.images, args.labels, args.synthetic, args.out)
        }
        Command::Train(args) => commands::cmd_train(&cfg, args.data, args.out),
        Command::Embed(args) => commands::embed(&cfg, args.data, args.checkpoint, args.out),
        Command::Probe(args) => commands::probe(&cfg, args.embeddings),
        Command::Cluster(args) => {
            commands::cluster(&cfg, args.embeddings, args.k_min, args.k_max)
        }
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}
