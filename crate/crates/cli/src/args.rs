use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use segeval_core::labelgen::{DEFAULT_MAX_ITERS, DEFAULT_TAU};
use segeval_core::metrics::DEFAULT_D_FRAC;
use segeval_core::protocols::DEFAULT_K;

use crate::report::Format;

#[derive(Debug, Clone, Parser)]
#[command(
    name = "segeval",
    version,
    about = "Evaluation and label-generation toolkit for unsupervised semantic segmentation"
)]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, env = "SEGEVAL_WORKERS", default_value_t = 0, global = true)]
    pub workers: usize,

    /// Also write the report here; wall time goes to `<report>.timing`.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    pub format: Format,

    /// Seed for every random draw.
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// mIoU, boundary mIoU, Img-Acc and F-measure of predictions against GT.
    Evaluate(EvaluateArgs),
    /// Hungarian matching of generated ids to GT ids from image-level label sets.
    Match(MatchArgs),
    /// k-means over attended image embeddings.
    Cluster(ClusterArgs),
    /// Pixel pseudo labels from centroids and the foreground gate.
    Assign(AssignArgs),
    /// k-NN labelling against a bank of labelled region embeddings.
    Distmatch(DistmatchArgs),
    /// Gradient checks of every loss kernel.
    Losscheck(LosscheckArgs),
    /// GT statistics: category frequencies and object-size buckets.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Root that manifest mask paths are relative to.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory of `<image_id>.lsmk` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_D_FRAC)]
    pub d_frac: f64,
    /// Expected category count; must agree with the manifest.
    #[arg(short = 'C')]
    pub categories: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Writes `mapping.txt` and the relabelled masks here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(short = 'C')]
    pub categories: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    /// Directory of `<image_id>.lemb` feature maps.
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of clusters.
    #[arg(long = "clusters", short = 'C')]
    pub clusters: usize,
    /// Output centroid file.
    #[arg(long)]
    pub centroids: PathBuf,
    /// Attention parameters (`LEMB`, (L+2) x 1 x L); all-zero when absent.
    #[arg(long)]
    pub attn: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AssignArgs {
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub centroids: PathBuf,
    #[arg(long)]
    pub attn: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Output directory for `<image_id>.lsmk` labels.
    #[arg(long)]
    pub out: PathBuf,
    /// Upsample each mask to the size of its GT mask under this root.
    #[arg(long)]
    pub size_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DistmatchArgs {
    /// Labelled subset used to build the bank.
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub train_emb: PathBuf,
    #[arg(long)]
    pub train_gt: PathBuf,
    /// Images to label.
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(short = 'k', default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub size_from: Option<PathBuf>,
    /// Also save the bank (`LBNK`).
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LosscheckArgs {
    /// Random instances per kernel.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(short = 'C')]
    pub categories: Option<u32>,
}
