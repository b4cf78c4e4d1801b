mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmdml::ErrorClass;

#[derive(Parser)]
#[command(name = "mmdml", version, about = "Double machine learning with multimodal confounders")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a semi-synthetic dataset.
    Generate(GenerateArgs),
    /// Estimate theta with one learner.
    Estimate(EstimateArgs),
    /// Evaluate a roster of learners under one split scheme.
    Benchmark(BenchmarkArgs),
    /// Per-epoch estimate of a fusion network on a fixed test split.
    Trace(TraceArgs),
    /// Add or replace a modality block with columns from an `id,...` table.
    ImportEmbeddings(ImportArgs),
    /// Re-execute the steps recorded in a run.json.
    Replay(ReplayArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Run configuration with a `dgp` section.
    #[arg(long, conflicts_with_all = ["n", "rho", "feature_dim", "seed"])]
    pub config: Option<PathBuf>,
    /// Rows of a three-modality surrogate dataset (without --config).
    #[arg(long)]
    pub n: Option<usize>,
    /// Explainable fraction of every modality.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Built-in learner, or a learner named in --config.
    #[arg(long)]
    pub learner: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single split with this train fraction.
    #[arg(long, conflicts_with = "kfold")]
    pub split: Option<f64>,
    /// K-fold cross-fitting.
    #[arg(long)]
    pub kfold: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Split seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learner_seed: Option<u64>,
    /// Comma-separated control modalities; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Existing dataset; otherwise one is generated from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration holding a fusion learner.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Learner name within --config; the first fusion learner by default.
    #[arg(long, requires = "config")]
    pub learner: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub learner_seed: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub modality: String,
    /// Allow overwriting an existing block.
    #[arg(long)]
    pub replace: bool,
}

#[derive(Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to the directory holding the run file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Validation => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(4);
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Trace(a) => commands::trace(a),
        Command::ImportEmbeddings(a) => commands::import_embeddings(a),
        Command::Replay(a) => commands::replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
