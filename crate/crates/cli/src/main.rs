mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stslab::budget::PlanMode;
use stslab::gradcheck::GradOp;
use stslab::harness::{LrSchedule, Task, Variant};
use stslab::rf::RfLayer;
use stslab::InitStrategy;

#[derive(Debug, Parser)]
#[command(name = "stslab", version, about = "Spatiotemporal convolution laboratory")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Scalar type; defaults to f64 for checks and f32 for training.
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<Dtype>,
    /// Worker threads for the convolution kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Receptive fields of layers, or the dilated-vs-STS comparison table.
    Rf(RfArgs),
    /// Training-budget accounting for pre-train plus fine-tune schedules.
    Budget(BudgetArgs),
    /// Slice a 3D network at one temporal index into a 2D network.
    Probe(ProbeArgs),
    /// Initialize a 3D network from a 2D checkpoint.
    Convert(ConvertArgs),
    /// Train a tiny network on moving shapes, logging JSON records.
    Train(TrainArgs),
    /// Image pre-training then fine-tuning against a from-scratch control.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// conv1d, conv2d, conv3d, sts or all.
    #[arg(long, default_value = "all", value_parser = parse_ops)]
    pub op: OpList,
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    /// Finite-difference step; 1e-5 for f64, 1e-2 for f32.
    #[arg(long)]
    pub step: Option<f64>,
    /// Largest acceptable relative error; 1e-6 for f64, 1e-2 for f32.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OpList(pub Vec<GradOp>);

fn parse_ops(s: &str) -> Result<OpList, String> {
    if s == "all" {
        return Ok(OpList(GradOp::ALL.to_vec()));
    }
    s.split(',').map(|o| o.parse().map_err(|e: stslab::Error| e.to_string())).collect::<Result<_, _>>().map(OpList)
}

#[derive(Debug, Args)]
pub struct RfArgs {
    /// `conv:K`, `conv:K,D`, `dilated:K,D` or `sts:K`; repeat to stack.
    #[arg(long = "layer", value_parser = parse_from_str::<RfLayer>)]
    pub layers: Vec<RfLayer>,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// imagenet, k400, ssv2 or custom (with --dataset-file).
    #[arg(long, default_value = "k400")]
    pub dataset: String,
    /// JSON file `{name, instances, frames_per_instance}`.
    #[arg(long)]
    pub dataset_file: Option<PathBuf>,
    /// Image dataset used for pre-training.
    #[arg(long, default_value = "imagenet")]
    pub pretrain_dataset: String,
    #[arg(long)]
    pub frames: u64,
    /// From-scratch baseline epochs; 100 in fixed mode, 256 in sota mode.
    #[arg(long)]
    pub baseline_epochs: Option<u64>,
    #[arg(long, default_value = "fixed", value_parser = parse_from_str::<PlanMode>)]
    pub mode: PlanMode,
    #[arg(long, default_value_t = stslab::budget::DEFAULT_FINETUNE_EPOCHS)]
    pub finetune_epochs: u64,
    /// Pre-train epochs; overrides the planner's choice.
    #[arg(long)]
    pub pretrain_epochs: Option<u64>,
    /// Candidate pre-train epochs for the fixed-budget planner.
    #[arg(long, value_delimiter = ',', default_values_t = stslab::budget::DEFAULT_CANDIDATES)]
    pub candidates: Vec<u64>,
    /// Decimals of the displayed multiplier.
    #[arg(long, default_value_t = 2)]
    pub decimals: u32,
    /// Round half up instead of truncating the displayed multiplier.
    #[arg(long)]
    pub half_up: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Network spec (JSON) of the 3D network.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub t: u8,
    /// Output checkpoint of the 2D network.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the 2D network spec.
    #[arg(long)]
    pub out_spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NetArgs {
    /// Network spec (JSON); otherwise a tiny net built from the flags below.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value = "sts-3x3x3", value_parser = parse_from_str::<Variant>)]
    pub variant: Variant,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// 2D checkpoint to transfer from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    /// scratch, zero-init, inflate:r0,r1,r2 or sts-2d.
    #[arg(long, default_value = "zero-init", value_parser = parse_from_str::<InitStrategy>)]
    pub init: InitStrategy,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the 3D network spec.
    #[arg(long)]
    pub out_spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "sts-3x3x3", value_parser = parse_from_str::<Variant>)]
    pub variant: Variant,
    #[arg(long, default_value = "joint", value_parser = parse_from_str::<Task>)]
    pub task: Task,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// With --load: scratch resumes from the checkpoint, anything else
    /// transfers it as a 2D checkpoint.
    #[arg(long, default_value = "scratch", value_parser = parse_from_str::<InitStrategy>)]
    pub init: InitStrategy,
    #[arg(long)]
    pub load: Option<PathBuf>,
    #[arg(long)]
    pub save: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Training clips.
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    /// Validation clips.
    #[arg(long, default_value_t = 256)]
    pub val: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Frame height and width.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub shapes: usize,
    #[arg(long, default_value_t = 4)]
    pub motions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// constant, cosine or cosine:W (W warm-up epochs).
    #[arg(long, default_value = "cosine:1", value_parser = parse_from_str::<LrSchedule>)]
    pub schedule: LrSchedule,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// JSON pipeline configuration replacing the built-in one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print every epoch record to standard error.
    #[arg(long)]
    pub verbose: bool,
}

fn parse_from_str<T: std::str::FromStr<Err = stslab::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: stslab::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
