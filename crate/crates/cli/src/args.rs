use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "safer",
    version,
    about = "Situation-aware facial emotion recognition: feature extraction, training, evaluation and dataset curation"
)]
pub struct Cli {
    /// JSON pipeline config; fields not given keep their defaults
    #[arg(long, global = true, env = "SAFER_CONFIG")]
    pub config: Option<PathBuf>,

    /// Random seed (overrides the config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for feature extraction
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Training epochs (overrides the config)
    #[arg(long, global = true)]
    pub epochs: Option<usize>,

    /// Initial learning rate (overrides the config)
    #[arg(long, global = true)]
    pub lr: Option<f64>,

    /// Minibatch size (overrides the config)
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Source {
    /// Dataset manifest (JSON Lines)
    #[arg(long)]
    pub manifest: PathBuf,

    /// Precomputed feature file from `features`; images are processed when absent
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackboneArg {
    Face,
    Background,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract feature bundles for manifest records into a feature file
    Features {
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one split
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Train the fusion classifier on the train split, selecting on val
    Train {
        #[command(flatten)]
        source: Source,
        /// Enabled streams, e.g. F, FB, FBP
        #[arg(long)]
        mask: Option<String>,
    },
    /// Evaluate a checkpoint: accuracy, confusion CSV and heat map
    Eval {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Fine-tuned face CNN written by `train`
        #[arg(long)]
        face_backbone: Option<PathBuf>,
    },
    /// Train and test one model per stream mask
    Ablate {
        #[command(flatten)]
        source: Source,
        /// Comma-separated stream masks
        #[arg(long, default_value = "F,FB,FP,FBP")]
        masks: String,
    },
    /// Write template explanations for predictions
    Explain {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Neutral baseline; defaults to baseline.json beside the checkpoint
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Explain only these record ids (comma-separated)
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
    /// Export backbone activation maps as grayscale PNGs
    FeatureMaps {
        #[arg(long)]
        image: PathBuf,
        /// Landmark sidecar; when given the face crop (or the subject-removed background) is used
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Layer ids (comma-separated)
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        /// Channels to export (comma-separated); all when omitted
        #[arg(long, value_delimiter = ',')]
        channels: Vec<usize>,
        #[arg(long, value_enum, default_value = "face")]
        backbone: BackboneArg,
    },
    /// Write a masked copy of a dataset and its manifest
    MaskAugment {
        #[arg(long)]
        manifest: PathBuf,
        /// Padding around the mask polygon, as a fraction of the interocular distance
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
        #[arg(long, default_value_t = 1.0)]
        opacity: f32,
        /// Mask color as r,g,b in [0, 1]
        #[arg(long, value_delimiter = ',', default_values_t = [0.92f32, 0.94, 0.96])]
        color: Vec<f32>,
    },
    /// Annotation consensus and video frame extraction
    Curate {
        #[command(subcommand)]
        command: CurateCommand,
    },
    /// Dataset composition reports
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Run the HTTP annotation service
    ServeAnnotation {
        #[arg(long)]
        manifest: PathBuf,
        /// Annotation log (JSON Lines, created when missing)
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Annotators per image before its consensus is final
        #[arg(long, default_value_t = 8)]
        panel_size: usize,
        #[arg(long, default_value_t = 4)]
        min_agreement: usize,
        #[arg(long, default_value_t = 4)]
        irrelevant_quorum: usize,
    },
    /// Assign stratified train/val/test splits
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Train, val and test fractions (overrides the config)
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
}

#[derive(Debug, Subcommand)]
pub enum CurateCommand {
    /// Decide keep/reject for every annotated image
    Consensus {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 4)]
        min_agreement: usize,
        #[arg(long, default_value_t = 4)]
        irrelevant_quorum: usize,
    },
    /// Sample frames from an animated GIF at a fixed rate
    Frames {
        #[arg(long)]
        video: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        fps: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Label counts against demographic tags
    Bias {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Per-class counts and imbalance ratio
    Balance {
        #[arg(long)]
        manifest: PathBuf,
    },
}
