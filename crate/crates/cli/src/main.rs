//! `cosod`: dataset synthesis, training, inference, evaluation and
//! co-segmentation from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cosod", version, about = "Co-salient object detection toolkit")]
pub struct Cli {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (for `eval`, a path ending in `.json` names the report file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into an existing non-empty output location.
    #[arg(long, global = true)]
    pub force: bool,
    /// Only print errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shape dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score prediction maps against a dataset.
    Eval(EvalArgs),
    /// Predict saliency maps with a checkpoint.
    Infer(InferArgs),
    /// Summarize dataset size and resolution.
    Stats(StatsArgs),
    /// Extract the common objects of an image folder.
    Cosegment(CosegmentArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    /// Images per group.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub image: usize,
    /// Distractor objects per image.
    #[arg(long, default_value_t = 1)]
    pub distractors: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train without the contrastive consensus term.
    #[arg(long)]
    pub no_iaccl: bool,
    /// Continue from a checkpoint file, or the latest one in a directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub dataset_root: PathBuf,
    /// Include image-averaged threshold curves.
    #[arg(long)]
    pub curves: bool,
    /// Score images on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; every group is processed.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    pub dataset_root: Option<PathBuf>,
    /// A folder of images forming one group.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub dataset_root: Option<PathBuf>,
    /// CSV with `group,stem,height,width` rows.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CosegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// `adaptive` (twice the map mean) or a fixed value in [0, 1].
    #[arg(long, default_value = "adaptive")]
    pub threshold: String,
    /// Background blur strength.
    #[arg(long, default_value_t = cosod_core::cosegment::DEFAULT_BLUR_SIGMA)]
    pub sigma: f32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let Some(out) = cli.out.clone() else {
        Cli::command()
            .error(clap::error::ErrorKind::MissingRequiredArgument, "the argument '--out <OUT>' is required")
            .exit();
    };
    match commands::run(&cli, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(cosod_core::Error::MissingPredictions(stems)) = e.downcast_ref::<cosod_core::Error>() {
                for s in stems {
                    eprintln!("missing: {s}");
                }
            }
            ExitCode::FAILURE
        }
    }
}
