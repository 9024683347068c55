//! Experiment frontend for the dual-refinement detector.
//!
//! Subcommands: gen-data, train, eval, detect, sweep, export-offsets.
//! Settings resolve in order: built-in defaults, then `--config` file,
//! then flags. Every run directory receives the resolved configuration as
//! `config.txt`, and re-running with that file and the same seed
//! reproduces the outputs bit for bit.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "drnet", version, about = "Dual-refinement detection experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape dataset (stills and/or video clips)
    GenData(GenDataArgs),
    /// Train a detector (or a temporal generator/detector pair)
    Train(TrainArgs),
    /// Evaluate mean average precision on a labeled dataset
    Eval(EvalArgs),
    /// Run detection over a dataset and write JSON-lines detections
    Detect(DetectArgs),
    /// Grid-evaluate key-frame duration and soft coefficient on videos
    Sweep(SweepArgs),
    /// Export refined sampling-center coordinates for one image
    ExportOffsets(ExportOffsetsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of still images
    #[arg(long, default_value_t = 0)]
    images: usize,
    /// Number of video clips
    #[arg(long, default_value_t = 0)]
    videos: usize,
    /// Frames per clip
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    canvas: usize,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
    #[arg(long, default_value_t = 10.0)]
    min_size: f64,
    #[arg(long, default_value_t = 28.0)]
    max_size: f64,
    /// Log-uniform width/height imbalance (0 keeps shapes square)
    #[arg(long, default_value_t = 0.3)]
    aspect_jitter: f64,
    #[arg(long, default_value_t = 0.5)]
    min_speed: f64,
    #[arg(long, default_value_t = 2.0)]
    max_speed: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Render 3-channel images (P6) instead of grayscale (P5)
    #[arg(long)]
    color: bool,
    /// Reject overlapping placements
    #[arg(long)]
    no_occlusion: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoint, metrics, and config echo
    #[arg(long)]
    out: PathBuf,
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// drnet | ssd4s | trnet | tdrnet
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Predict sampling offsets from detection features instead of anchor
    /// offsets
    #[arg(long)]
    no_feature_refine: bool,
    /// Replace the deformable detection head with plain convolutions
    #[arg(long)]
    no_deform_head: bool,
    /// Single 3x3 detection path
    #[arg(long)]
    single_head: bool,
    /// 3x3 plus 5x5 detection paths
    #[arg(long)]
    multi_head: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory containing model.afw / model.cfg
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate a saved detections file instead of running a model
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Detect over one video clip (directory name under videos/) instead
    /// of the still images
    #[arg(long)]
    video: Option<String>,
    /// Key-frame duration for temporal pairs
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Soft refinement coefficient for temporal pairs
    #[arg(long, default_value_t = 1.0)]
    e: f64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Run directory containing a temporal pair checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with videos/
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated key-frame durations
    #[arg(long, default_value = "1,2,4,8")]
    k: String,
    /// Comma-separated soft coefficients
    #[arg(long, default_value = "1.0,0.75,0.5")]
    e: String,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExportOffsetsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file (binary PGM/PPM)
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenData(args) => commands::gen_data(args),
        Cmd::Train(args) => commands::train(args),
        Cmd::Eval(args) => commands::eval(args),
        Cmd::Detect(args) => commands::detect(args),
        Cmd::Sweep(args) => commands::sweep(args),
        Cmd::ExportOffsets(args) => commands::export_offsets(args),
    }
}
