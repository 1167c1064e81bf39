//! Flag definitions.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use v2m_core::alignment::Alpha;
use v2m_core::model::ModelConfig;
use v2m_core::trainer::ScheduleKind;

#[derive(Debug, Parser)]
#[command(name = "v2m", version, about = "Dynamics- and semantics-conditioned music generation for video")]
pub struct Cli {
    /// Flat `key = value` file supplying any long flag; flags on the
    /// command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset of paired clips.
    MakeData(MakeDataArgs),
    /// Train the adapters on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Generate music for one clip or for a dataset split.
    Generate(GenerateArgs),
    /// Compare generated audio against references.
    Eval(EvalArgs),
    /// Train and evaluate once per dynamics strength.
    SweepAlpha(SweepAlphaArgs),
    /// Train and evaluate once per loss-weight schedule.
    CompareSchedules(CompareSchedulesArgs),
    /// Run the numerical invariant suite.
    Selftest,
}

fn parse_alpha(s: &str) -> Result<Alpha, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    Alpha::new(v).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    /// Small decoder and codebooks; trains in seconds.
    Micro,
    /// Desk-scale reference sizes.
    Desk,
}

impl ModelSize {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelSize::Micro => ModelConfig::micro(),
            ModelSize::Desk => ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MakeDataArgs {
    /// Number of pairs (at least 10).
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(10..))]
    pub n: u64,
    /// JSON file with per-item spec ranges.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Clip length in seconds; overrides the spec file.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Replace the tone after the first quarter of each clip with one
    /// unrelated to the video.
    #[arg(long)]
    pub random_tail: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optimisation and model options shared by every training command.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainOptions {
    #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
    pub model: ModelSize,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Linear warmup steps; 100 by default, capped at the run length.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Peak schedule weight.
    #[arg(long, default_value_t = 1.0)]
    pub a_max: f64,
    /// Schedule floor.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// k-means iterations per codebook.
    #[arg(long, default_value_t = 20)]
    pub codec_iters: usize,
    /// Threads computing per-item gradients. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by `make-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = ScheduleKind::Cosine)]
    pub schedule: ScheduleKind,
    #[arg(long, default_value = "0.25", value_parser = parse_alpha)]
    pub alpha: Alpha,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write a checkpoint every this many steps.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    pub opts: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A clip directory, or a dataset directory to generate for a split.
    #[arg(long)]
    pub video: PathBuf,
    /// Split used when `--video` is a dataset.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Overrides the strength stored in the checkpoint.
    #[arg(long, value_parser = parse_alpha)]
    pub alpha: Option<Alpha>,
    /// Zero decodes greedily.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 16)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Spectral feature extractor settings.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ExtractorArgs {
    #[arg(long, default_value_t = 256)]
    pub frame_len: usize,
    #[arg(long, default_value_t = 128)]
    pub hop: usize,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Generated clips: a clip directory or a directory of `items/`.
    #[arg(long)]
    pub gen_dir: PathBuf,
    /// Reference clips, laid out like `--gen-dir`.
    #[arg(long)]
    pub ref_dir: PathBuf,
    /// Reference features saved by an earlier `eval`; replaces the
    /// Fréchet reference only.
    #[arg(long, value_name = "FILE")]
    pub ref_features: Option<PathBuf>,
    /// Split used when a directory holds a dataset split file.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by both sweeps.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepOptions {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of training seeds per setting.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// First training seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub opts: TrainOptions,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    /// Sampling temperature for the generated audio; zero is greedy.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepAlphaArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1", value_parser = parse_alpha)]
    pub alphas: Vec<Alpha>,
    #[arg(long, default_value_t = ScheduleKind::Cosine)]
    pub schedule: ScheduleKind,
    #[command(flatten)]
    pub sweep: SweepOptions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareSchedulesArgs {
    #[arg(long, value_delimiter = ',', default_value = "constant,random,step,linear,cosine")]
    pub schedules: Vec<ScheduleKind>,
    #[arg(long, default_value = "0.25", value_parser = parse_alpha)]
    pub alpha: Alpha,
    #[command(flatten)]
    pub sweep: SweepOptions,
}
