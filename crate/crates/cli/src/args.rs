use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cxr-sslx", version, about = "Self-supervised transfer learning for chest X-ray classification")]
pub struct Cli {
    /// Master seed for every stochastic component; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log debug output.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised pre-training on the unlabeled training split.
    SslPretrain(SslPretrainArgs),
    /// Supervised fine-tuning with per-epoch evaluation on the test split.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Write Grad-CAM++ overlays for individual images.
    Explain(ExplainArgs),
    /// Compare finished runs and emit plot data.
    Report(ReportArgs),
    /// Extract backbone weights from any checkpoint for use as transfer initialization.
    ExportBackbone(ExportArgs),
}

#[derive(Debug, Args)]
pub struct RunTarget {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,

    /// Dataset root (`<root>/<Class>/*.png`) or a manifest TSV.
    #[arg(long)]
    pub data: PathBuf,

    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,

    /// Reuse an existing, non-empty run directory.
    #[arg(long)]
    pub force: bool,

    /// Continue from the last checkpoint in the run directory.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SslPretrainArgs {
    #[command(flatten)]
    pub run: RunTarget,

    /// External backbone checkpoint (required when init_mode is transfer_ssl).
    #[arg(long)]
    pub backbone: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunTarget,

    /// Backbone source: a self-supervised or external-backbone checkpoint.
    #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
    pub init: Option<PathBuf>,

    /// Start from random weights.
    #[arg(long)]
    pub scratch: bool,

    /// Stratified fraction of the training split to fine-tune on; overrides the config.
    #[arg(long)]
    pub label_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Dataset root or manifest TSV; split with the checkpoint's seed and ratio.
    #[arg(long)]
    pub data: PathBuf,

    /// Directory for `evaluation.json` and `confusion.csv`; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Target class; defaults to the predicted class of each image.
    #[arg(long)]
    pub class: Option<String>,

    /// Output directory for `<name>_cam_<class>.png` files.
    #[arg(long, default_value = "heatmaps")]
    pub out: PathBuf,

    /// `jet` or `bluered`.
    #[arg(long, default_value = "jet")]
    pub colormap: String,

    /// Heatmap blend factor.
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f32,

    /// Images to explain.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory for `comparison.csv` and `fraction_vs_metric.csv`; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Run directories produced by `finetune`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Checkpoint of any stage.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Destination of the backbone-only checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}
