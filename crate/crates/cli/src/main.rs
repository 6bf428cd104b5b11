use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epcache::{EmbeddingLayerId, RetrievalMethod, Split};
use serde::Serialize;

mod commands;
mod config;
mod error;
mod workspace;

use config::ExperimentConfig;
use error::CliError;
use workspace::{CompressionKind, Variant};

/// Episodic cache experiments: data, backbones, caches, attacks, corruptions
/// and reports, each stage a subcommand reading and writing artifacts under
/// the output directory.
#[derive(Debug, Parser, Serialize)]
#[command(name = "epcache", version)]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: config `out_dir`, then $EPCACHE_OUT, then ./epcache-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct CacheArgs {
    #[arg(long, value_enum, default_value_t = Variant::Standard)]
    pub variant: Variant,

    /// `hidden` or `probs` (default: config `cache.layer`).
    #[arg(long)]
    pub layer: Option<EmbeddingLayerId>,

    #[arg(long, value_enum, default_value_t = CompressionKind::None)]
    pub compression: CompressionKind,

    /// `continuous` or `<k>-nn` (default: config `cache.retrieval`).
    #[arg(long)]
    pub retrieval: Option<RetrievalMethod>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Clean validation accuracy.
    Clean,
    /// Gray-box adversarial validation accuracy at ε = 0.06.
    Gray,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kmeans,
    Pca,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Threat {
    White,
    Gray,
    Black,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic train/val/test splits.
    GenData,
    /// Train one backbone variant on the training split.
    TrainBackbone {
        #[arg(long, value_enum, default_value_t = Variant::Standard)]
        variant: Variant,
    },
    /// Embed a split with a trained backbone.
    Extract {
        #[arg(long, value_enum, default_value_t = Variant::Standard)]
        variant: Variant,
        #[arg(long)]
        layer: Option<EmbeddingLayerId>,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Build a cache from training-split embeddings.
    BuildCache {
        #[arg(long, value_enum, default_value_t = Variant::Standard)]
        variant: Variant,
        #[arg(long)]
        layer: Option<EmbeddingLayerId>,
        /// Inverse temperature (default: config `cache.theta`).
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Grid-search θ on the validation split.
    TuneTheta {
        #[command(flatten)]
        cache: CacheArgs,
        #[arg(long, value_enum, default_value_t = Objective::Clean)]
        objective: Objective,
    },
    /// Compress a cache by k-means over keys or PCA over key dimensions.
    Compress {
        #[arg(long, value_enum, default_value_t = Variant::Standard)]
        variant: Variant,
        #[arg(long)]
        layer: Option<EmbeddingLayerId>,
        #[arg(long, value_enum)]
        method: Method,
        /// Centroids (k-means) or dimensions (PCA); default from the config fractions.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Clean test accuracy of a backbone and its cache.
    EvalClean {
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Targeted PGD sweep under a threat model.
    EvalAdv {
        #[command(flatten)]
        cache: CacheArgs,
        #[arg(long, value_enum)]
        threat: Threat,
        /// Comma-separated normalized budgets (default: config `attack.epsilons`).
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
    },
    /// CE / mCE of a backbone and its cache against the reference backbone.
    EvalCorrupt {
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Assemble summary tables from earlier evaluations.
    Report {
        /// 2×2 table of gray-box accuracy at ε = 0.06 and mCE, cache ± by
        /// augmentation-trained backbone ±.
        #[arg(long)]
        quadrants: bool,
        /// Every adversarial sweep in one CSV.
        #[arg(long)]
        sweep: bool,
        /// Cache layer for the gray-box column.
        #[arg(long, default_value = "hidden")]
        gray_layer: EmbeddingLayerId,
        /// Cache layer for the mCE column.
        #[arg(long, default_value = "probs")]
        mce_layer: EmbeddingLayerId,
    },
}

fn parse_args() -> Result<Cli, CliError> {
    Cli::try_parse().map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            e.exit();
        }
        let text = e.to_string();
        let first = text.lines().next().unwrap_or_default();
        CliError::usage(first.trim_start_matches("error: ").to_owned())
    })
}

fn run() -> Result<(), CliError> {
    let cli = parse_args()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("runtime", e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.resolve_out_dir(cli.out.clone());
    cfg.seed()?;
    commands::dispatch(&cli.command, cfg)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
