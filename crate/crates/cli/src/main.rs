//! `fcnn`: data generation, training, inference, evaluation, benchmarking and
//! receptive-field reports for the crowd-segmentation engine.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "fcnn", version, about = "Fully convolutional crowd segmentation")]
pub struct Cli {
    /// Run every parallel section on one thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Seed for data generation, initialisation and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic multi-scene dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a single-cue branch or a fusion model.
    Train(TrainArgs),
    /// Segment one clip given as PGM frames.
    Infer(InferArgs),
    /// ROC curve and AUC on a manifest split.
    Eval(EvalArgs),
    /// Full-frame vs. patch-scan timing and equivalence.
    Bench(BenchArgs),
    /// Per-layer receptive-field table for a layer spec.
    Rf(RfArgs),
    /// Generate data, train all branches and fusion schemes, evaluate everything.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub scenes: usize,
    #[arg(long, default_value_t = 2)]
    pub clips_per_scene: usize,
    /// Fraction of scenes used for training.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Fraction of scenes held out for testing; validation gets the rest.
    #[arg(long, default_value_t = 0.0)]
    pub test: f64,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum CueArg {
    Appearance,
    Motion,
    Structure,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum SchemeArg {
    Input,
    Feature,
    Decision,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum CombinerArg {
    Learned,
    Average,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum ResolutionArg {
    Pixel,
    Output,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum OracleArg {
    Ideal,
    Inverted,
}

#[derive(Debug, Clone, Args, Serialize, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Iterations per layer-wise or cascade stage.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Iterations of the final all-layer stage.
    #[arg(long)]
    pub finetune_iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub crops_per_frame: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
#[command(group = clap::ArgGroup::new("what").required(true).args(["cue", "scheme"]))]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub cue: Option<CueArg>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Layer spec for single-cue and input-fusion networks.
    #[arg(long)]
    pub spec: Option<String>,
    /// Directory holding appearance.ckpt, motion.ckpt and structure.ckpt (feature/decision).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "learned")]
    pub combiner: CombinerArg,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// A `.ckpt` file or a fusion directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cue fed to a single-channel network.
    #[arg(long, value_enum)]
    pub cue: Option<CueArg>,
    /// Clip frames in temporal order.
    #[arg(long, num_args = 1.., required = true)]
    pub frames: Vec<PathBuf>,
    /// Frame to segment; defaults to the last.
    #[arg(long)]
    pub label_index: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group = clap::ArgGroup::new("model").required(true).args(["checkpoint", "baseline", "oracle"]))]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub cue: Option<CueArg>,
    /// Raw-intensity baseline with polarity fitted on the training split.
    #[arg(long)]
    pub baseline: bool,
    /// Score with the ground truth itself (or its complement).
    #[arg(long, value_enum)]
    pub oracle: Option<OracleArg>,
    #[arg(long, value_enum, default_value = "pixel")]
    pub resolution: ResolutionArg,
    #[arg(long, default_value = "model")]
    pub name: String,
    /// Also write probability maps and overlays for every clip.
    #[arg(long)]
    pub overlays: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Network to time; a freshly initialised default network otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<String>,
    /// Comma-separated `HxW` sizes.
    #[arg(long, default_value = "112x112,160x160,224x224")]
    pub sizes: String,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 56)]
    pub patch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RfArgs {
    #[arg(long)]
    pub spec: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Iterations per cascade stage of the fusion models.
    #[arg(long)]
    pub fusion_iters: Option<usize>,
    /// Start input fusion from the trained appearance branch.
    #[arg(long)]
    pub warm_input: bool,
    #[command(flatten)]
    pub train: TrainOverrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("fcnn: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
