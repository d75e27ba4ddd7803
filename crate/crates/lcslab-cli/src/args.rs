//! Command-line surface. Every value flag is optional at parse time: the
//! command resolves it against the config file (`--config`) and built-in
//! defaults, so flags stay normative while the file is convenience.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "lcslab",
    version,
    about = "Object-based land-cover classification on synthetic landscapes",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset plus ground-truth rasters
    Synth(SynthArgs),
    /// Oversegment every sample into objects of a minimum size
    Segment(SegmentArgs),
    /// Export region-adjacency graphs for external tooling
    Graph(GraphArgs),
    /// Train a classifier on sparse point labels
    Train(TrainArgs),
    /// Write predicted class rasters for a dataset split
    Predict(PredictArgs),
    /// Score predictions: accuracy, F1, and fragmentation metrics
    Eval(EvalArgs),
    /// Run the minimum-mapping-unit grid end to end with plots
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Plain-text config file (section `synth.`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Number of land-cover classes
    #[arg(long)]
    pub classes: Option<u16>,
    /// Spectral channels per pixel
    #[arg(long)]
    pub channels: Option<usize>,
    /// Patch height in pixels
    #[arg(long)]
    pub height: Option<usize>,
    /// Patch width in pixels
    #[arg(long)]
    pub width: Option<usize>,
    /// Voronoi sites per patch
    #[arg(long)]
    pub blobs: Option<usize>,
    /// Gaussian channel noise standard deviation
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Point labels per patch
    #[arg(long)]
    pub labels: Option<usize>,
    /// Training patches
    #[arg(long)]
    pub train: Option<usize>,
    /// Validation patches
    #[arg(long)]
    pub val: Option<usize>,
    /// Test patches
    #[arg(long)]
    pub test: Option<usize>,
    /// Generator seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SegmentArgs {
    /// Plain-text config file (section `segment.`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input dataset file
    #[arg(long)]
    pub dataset: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Segmentation mode: trivial | fh
    #[arg(long)]
    pub mode: Option<String>,
    /// Minimum object size in pixels (the minimum mapping unit)
    #[arg(long)]
    pub amin: Option<usize>,
    /// Merging scale parameter (larger favors larger objects)
    #[arg(long)]
    pub k: Option<f64>,
}

#[derive(Args)]
pub struct GraphArgs {
    /// Plain-text config file (section `graph.`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input dataset file
    #[arg(long)]
    pub dataset: Option<String>,
    /// Segmentation directory (from `segment`)
    #[arg(long)]
    pub segs: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Directory of external feature maps replacing raw-image statistics
    #[arg(long)]
    pub features: Option<String>,
}

/// Model and optimizer flags shared by `train` and `sweep`.
#[derive(Args)]
pub struct ModelFlags {
    /// Architecture: basemlp | basegnn | gunet | basecnn
    #[arg(long)]
    pub arch: Option<String>,
    /// Graph operator: gcn | sage | gat | gt
    #[arg(long)]
    pub op: Option<String>,
    /// Aggregation level: input | output
    #[arg(long)]
    pub agg: Option<String>,
    /// Hidden width
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Attention heads
    #[arg(long)]
    pub heads: Option<usize>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Patches per optimization step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Base seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seeded repetitions
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Training-label fraction: 1 | 1/2 | 1/4 | 1/8 | 1/16
    #[arg(long)]
    pub fraction: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Plain-text config file (section `train.`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input dataset file
    #[arg(long)]
    pub dataset: Option<String>,
    /// Segmentation directory (from `segment`)
    #[arg(long)]
    pub segs: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Directory of external feature maps replacing raw-image statistics
    #[arg(long)]
    pub features: Option<String>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Plain-text config file (section `predict.`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input dataset file
    #[arg(long)]
    pub dataset: Option<String>,
    /// Segmentation directory (from `segment`)
    #[arg(long)]
    pub segs: Option<String>,
    /// Model directory (from `train`)
    #[arg(long)]
    pub model: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Directory of external feature maps replacing raw-image statistics
    #[arg(long)]
    pub features: Option<String>,
    /// Which training repeat's checkpoint to use
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Dataset split: train | val | test | all
    #[arg(long)]
    pub split: Option<String>,
    /// Seed for prediction-time pooling draws
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Plain-text config file (section `eval.`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Predicted class rasters (from `predict`)
    #[arg(long)]
    pub pred: Option<String>,
    /// Sample index list matching the predictions
    #[arg(long)]
    pub indices: Option<String>,
    /// Input dataset file (supplies the labels)
    #[arg(long)]
    pub dataset: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Pixel tolerance for the headline accuracy: 0 | 1
    #[arg(long)]
    pub tolerance: Option<usize>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Plain-text config file (section `sweep.`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input dataset file
    #[arg(long)]
    pub dataset: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Comma-separated minimum mapping units, e.g. 1,5,10,20,40
    #[arg(long)]
    pub mmus: Option<String>,
    /// Merging scale parameter for non-trivial cells
    #[arg(long)]
    pub k: Option<f64>,
    /// Worker threads for grid cells
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub model: ModelFlags,
}
