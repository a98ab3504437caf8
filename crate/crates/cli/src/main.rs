mod commands;
mod heatmap;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kpgen_core::datagen::Family;

/// Unsupervised 3D keypoint detection: synthetic data, training, detection and evaluation.
#[derive(Parser, Debug)]
#[command(name = "kpgen", version)]
pub struct Cli {
    /// Worker threads for descriptor extraction and evaluation (0 = all cores).
    #[arg(long, global = true, env = "UKP_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic corpus with a manifest.
    GenData(GenDataArgs),
    /// Train a detector on the train split of a corpus.
    Train(TrainArgs),
    /// Detect keypoints on one cloud.
    Detect(DetectArgs),
    /// Evaluate a detector (or the ground-truth oracle) on a corpus.
    Eval(EvalArgs),
    /// Write a PLY colored by keypoint probability (blue 0 to red 1).
    ExportHeatmap(HeatmapArgs),
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated shape families.
    #[arg(long, value_delimiter = ',', value_parser = parse_family, default_value = "rectangle,box,table,chair")]
    pub families: Vec<Family>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 84)]
    pub per_family: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    /// Gaussian jitter on sampled positions, before normalization.
    #[arg(long, default_value_t = 0.002)]
    pub jitter: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full widths and 16³ descriptors.
    Full,
    /// Reduced widths that train on one CPU in minutes.
    Desk,
    /// Minimal widths for smoke runs.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoGan,
    NoDistill,
    NoLrf,
    NoSym,
}

impl Ablation {
    pub fn key(self) -> &'static str {
        match self {
            Ablation::NoGan => "no_gan",
            Ablation::NoDistill => "no_distill",
            Ablation::NoLrf => "no_lrf",
            Ablation::NoSym => "no_sym",
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` file layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    /// Built-in defaults the config file is layered on.
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    /// Restrict training to these families.
    #[arg(long, value_delimiter = ',', value_parser = parse_family)]
    pub families: Vec<Family>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub nms_radius: f32,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Emit exactly this many keypoints; fails if fewer pass the threshold.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Keypoint file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-point embeddings here.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Mean correspondence ratio of K-means clusters against part labels.
    Part,
    /// Keypoint mIoU against ground truth over geodesic thresholds.
    Miou,
    /// Repeatability under random rotations.
    Repeat,
    /// Correspondence IoU between full and downsampled detections.
    Corr,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_delimiter = ',', value_parser = parse_family)]
    pub families: Vec<Family>,
    /// Trained checkpoint; required unless --oracle is given.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub model: Option<PathBuf>,
    /// Use the ground-truth keypoints as the detector.
    #[arg(long)]
    pub oracle: bool,
    /// CSV report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub nms_radius: f32,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Keypoints per cloud for repeat and corr (top-ranked after suppression).
    #[arg(long, default_value_t = 4)]
    pub n_keypoints: usize,
    #[arg(long, default_value_t = 20)]
    pub rotations: usize,
    /// Euclidean match distance for repeatability.
    #[arg(long, default_value_t = 0.1)]
    pub dist_threshold: f32,
    /// K-means clusters for the part task.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Point count of the downsampled copy for the corr task.
    #[arg(long, default_value_t = 512)]
    pub points_low: usize,
    /// Report the Dice overlap instead of IoU for the corr task.
    #[arg(long)]
    pub dice: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("could not size the worker pool: {e}");
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
