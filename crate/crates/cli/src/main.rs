//! `textpose`: ingest data, train, generate, evaluate, interpolate and
//! render poses.
//!
//! Exit codes: 0 on success, 1 on internal errors, 2 on invalid input.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] textpose::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "textpose", version, about = "Text-conditioned pose synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a dataset cache split from COCO keypoint and caption files.
    Ingest(IngestArgs),
    /// Write the synthetic three-class dataset to a cache file.
    Synth(SynthArgs),
    /// Train one phase of a model.
    Train(TrainArgs),
    /// Generate poses for a caption.
    Generate(GenerateArgs),
    /// Compute nearest-neighbour metrics on a dataset split.
    Eval(EvalArgs),
    /// Interpolate between two captions, or between two noise vectors.
    Interpolate(InterpolateArgs),
    /// Draw a pose file as SVG.
    Render(RenderArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub keypoints: PathBuf,
    #[arg(long)]
    pub captions: PathBuf,
    /// Dataset cache to create or update.
    #[arg(long)]
    pub out: PathBuf,
    /// Which split of the cache to fill: train or val.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = textpose::data::MIN_VISIBLE_KEYPOINTS)]
    pub min_visible: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 300)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Text backend flags shared by the commands that embed captions.
#[derive(Args, Debug, Clone, Serialize)]
pub struct TextArgs {
    /// Word-vector file; overrides the configured or recorded backend.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub vocab_limit: Option<usize>,
    /// Use the hashed backend with this seed.
    #[arg(long, conflicts_with = "vectors")]
    pub hashed_text: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: String,
    #[arg(long)]
    pub phase: u8,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to continue from; phase 2 starts from a phase-1 checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Allow phase 2 without a phase-1 checkpoint.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// full, desk, toy or tiny.
    #[arg(long)]
    pub model: Option<String>,
    /// Print a progress line every this many steps; 0 disables.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    #[command(flatten)]
    pub text: TextArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = textpose::posecodec::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    #[command(flatten)]
    pub text_backend: TextArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split whose captions drive generation: val or train.
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value_t = textpose::eval::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write distance histograms to this CSV.
    #[arg(long)]
    pub histograms: Option<PathBuf>,
    /// Only use the first this many captions of the split.
    #[arg(long)]
    pub max_captions: Option<usize>,
    #[arg(long, default_value_t = textpose::posecodec::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    #[command(flatten)]
    pub text_backend: TextArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub text_a: String,
    /// Second caption; not used with --noise.
    #[arg(long, required_unless_present = "noise")]
    pub text_b: Option<String>,
    /// Keep the caption fixed and interpolate between two noise vectors.
    #[arg(long)]
    pub noise: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = textpose::posecodec::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    #[command(flatten)]
    pub text_backend: TextArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub pose: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Interpolate(a) => commands::interpolate(a),
        Command::Render(a) => commands::render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
