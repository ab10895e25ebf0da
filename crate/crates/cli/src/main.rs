//! `ris`: fixtures, clustering, scoring, transfer, retrieval and evaluation
//! over style-coefficient bundles.
//!
//! Results go to stdout (TSV or JSON); diagnostics go to stderr. Exit codes:
//! 0 success, 1 usage error, 2 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::LevelFilter;
use ris_core::attribution::Normalize;
use ris_core::retrieval::MaskMode;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "ris",
    version,
    about = "Feature-level style transfer and retrieval over generator style coefficients"
)]
pub struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true, env = "RIS_THREADS")]
    pub threads: Option<usize>,

    /// Seed for every random draw the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Diagnostics level on stderr (off, error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit shared spherical k-means centroids on one layer's spatial cells.
    Cluster(ClusterArgs),
    /// Write per-image memberships and contribution scores to a new bundle.
    Score(ScoreArgs),
    /// Move one feature of a source style toward a reference.
    Transfer(TransferArgs),
    /// Build or query a feature retrieval index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Retrieval metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Contribution-score analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Write a synthetic bundle from the toy generator.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Number of clusters.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// Layer whose cells are clustered; defaults to the 32×32 layer rule.
    #[arg(long)]
    pub layer: Option<String>,
    /// Fit on a seeded sample of this many images.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = ris_core::kmeans::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long, default_value_t = ris_core::kmeans::DEFAULT_TOL, value_parser = positive)]
    pub tol: f64,
    /// Cluster model output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a semantic labeling JSON (region names on fixtures).
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    /// Labeling recorded as the row order of the scores.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// none or per-layer-mean.
    #[arg(long, default_value = "none")]
    pub normalize: Normalize,
    /// Also write the dataset-averaged matrix as `contrib/batch`.
    #[arg(long)]
    pub batch: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub reference: String,
    /// Feature name from the labeling, or `pose`.
    #[arg(long)]
    pub feature: String,
    #[arg(long, default_value_t = ris_core::transfer::DEFAULT_ALPHA, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = ris_core::transfer::DEFAULT_TAU, value_parser = positive)]
    pub tau: f64,
    /// One-hot masks instead of the softmax.
    #[arg(long)]
    pub hard: bool,
    /// Keep the feature's coarse-layer channels.
    #[arg(long)]
    pub no_restrict: bool,
    #[arg(long, default_value = "none")]
    pub normalize: Normalize,
    /// Output file for the transferred style (raw little-endian f32).
    #[arg(long)]
    pub out: PathBuf,
    /// Channels listed in the report.
    #[arg(long, default_value_t = 20)]
    pub report_top: usize,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Embed every image of a bundle for the requested features.
    Build(IndexBuildArgs),
    /// Top-k nearest or furthest images for one query.
    Query(IndexQueryArgs),
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Comma-separated features; defaults to every labeled feature.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    #[arg(long, default_value_t = ris_core::transfer::DEFAULT_TAU, value_parser = positive)]
    pub tau: f64,
    #[arg(long, default_value = "none")]
    pub normalize: Normalize,
    /// per-image or batch.
    #[arg(long, default_value = "per-image")]
    pub mask_mode: MaskMode,
    /// Round embeddings to f16 precision.
    #[arg(long)]
    pub half: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexQueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Indexed image id, or a raw f32 embedding file. With `--query-bundle`,
    /// an image id inside that bundle.
    #[arg(long)]
    pub query: String,
    /// Embed the query image from this bundle with the index's settings.
    #[arg(long)]
    pub query_bundle: Option<PathBuf>,
    #[arg(long)]
    pub feature: String,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub top: u64,
    #[arg(long)]
    pub furthest: bool,
    /// Drop the query image itself (indexed ids only).
    #[arg(long)]
    pub exclude_self: bool,
    #[arg(long, value_enum, default_value_t = Format::Tsv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Tsv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Attribute Matching Score per feature.
    Ams(AmsArgs),
    /// Identity IoU of retrieved sets for every feature pair.
    Trsi(TrsiArgs),
}

#[derive(Debug, Args)]
pub struct AmsArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// CSV `image_id,<attr>,...` with values in [0, 1].
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSON `{"feature": ["attr", ...]}`; defaults to the CelebA table.
    #[arg(long)]
    pub attribute_groups: Option<PathBuf>,
    /// Comma-separated features; defaults to indexed features with a group.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    #[arg(long, default_value_t = ris_core::evaluation::DEFAULT_AMS_TOP, value_parser = nonzero)]
    pub top: usize,
    #[arg(long, default_value_t = ris_core::evaluation::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Seeded sample of query images; defaults to every indexed image.
    #[arg(long)]
    pub queries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrsiArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// CSV `image_id,identity_id`.
    #[arg(long)]
    pub identities: PathBuf,
    #[arg(long, default_value_t = ris_core::evaluation::DEFAULT_TRSI_QUERIES, value_parser = nonzero)]
    pub queries: usize,
    #[arg(long, default_value_t = ris_core::evaluation::DEFAULT_TRSI_SET_SIZE, value_parser = nonzero)]
    pub set_size: usize,
    /// Comma-separated features; defaults to every indexed feature.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Share of top-n channels common to every submembership cluster, per K.
    Submembership(SubmembershipArgs),
}

#[derive(Debug, Args)]
pub struct SubmembershipArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value = "hair")]
    pub feature: String,
    #[arg(long, value_delimiter = ',', default_value = "2,5,10,20,50,100", value_parser = nonzero)]
    pub k_list: Vec<usize>,
    #[arg(long, default_value_t = ris_core::evaluation::DEFAULT_TOP_N, value_parser = nonzero)]
    pub top_n: usize,
    /// Seeded sample of images; defaults to all.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value = "none")]
    pub normalize: Normalize,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    pub regions: u64,
    /// Comma-separated `resolution:channels` per layer.
    #[arg(long, value_delimiter = ',', default_value = "4:8,8:8,16:8", value_parser = layer_spec)]
    pub layers: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 64)]
    pub images: usize,
    /// JSON `[{"members": [...], "regions": [...]}]`.
    #[arg(long, conflicts_with = "group_size")]
    pub groups: Option<PathBuf>,
    /// Plant per-region groups of this size.
    #[arg(long, value_parser = nonzero)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got {s}"))
    }
}

fn nonzero(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(format!("{e}")),
    }
}

fn layer_spec(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(':')
        .ok_or_else(|| format!("expected resolution:channels, got `{s}`"))?;
    let r: usize = r
        .trim()
        .parse()
        .map_err(|e| format!("resolution `{r}`: {e}"))?;
    let c: usize = c
        .trim()
        .parse()
        .map_err(|e| format!("channels `{c}`: {e}"))?;
    if r == 0 || c == 0 {
        return Err(format!("resolution and channels must be positive in `{s}`"));
    }
    Ok((r, c))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if threads.is_some_and(|n| n > 1) {
        log::warn!("built without the `parallel` feature; running on one thread");
    }
    Ok(())
}
