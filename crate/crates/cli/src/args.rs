use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "lorpman", version, about = "Low-rank Pareto manifold learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the two-parameter toy manifold and plot its trajectories.
    Toy(ToyArgs),
    /// Train on a synthetic multi-task problem and report the validation front.
    Synth(SynthArgs),
    /// Hypervolume of a CSV of objective vectors.
    Hv(HvArgs),
    /// Sweep one training parameter over several seeds.
    Ablate(AblateArgs),
    /// Run the construction checks and print pass/fail.
    Checks(ChecksArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lorpman,
    Pamal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HvMethodArg {
    /// Exact up to three objectives, Monte Carlo beyond.
    Auto,
    Exact,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrientationArg {
    Max,
    Min,
}

/// Training flags shared by `synth` and `ablate`. Unset flags keep the value
/// from `--config` or the built-in default.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub freeze_epoch: Option<usize>,
    #[arg(long)]
    pub window_b: Option<usize>,
    #[arg(long)]
    pub batch_q: Option<usize>,
    /// One value for every task, or a comma-separated value per task.
    #[arg(long)]
    pub dirichlet_p: Option<String>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub lambda_o: Option<f64>,
    #[arg(long)]
    pub scale_s: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Monte Carlo samples for hypervolumes beyond three objectives.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Skip the per-epoch validation hypervolume.
    #[arg(long)]
    pub no_epoch_hv: bool,
}

/// Synthetic problem flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ProblemFlags {
    /// Number of tasks.
    #[arg(long)]
    pub m: Option<usize>,
    /// Input dimension.
    #[arg(long)]
    pub u: Option<usize>,
    /// Task conflict in [0, 1].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Total rows before the 80/20 split.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Per-task kinds, e.g. `reg,reg,cls:4`.
    #[arg(long)]
    pub tasks: Option<String>,
    /// Seed for data generation; defaults to the training seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub window_b: Option<usize>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub dirichlet_p: Option<String>,
    #[arg(long)]
    pub record_every: Option<usize>,
    /// Grid spacing of the reference front.
    #[arg(long)]
    pub resolution: Option<f64>,
    #[arg(long, default_value = "out/toy")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub problem: ProblemFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Also write the generated train/validation data as CSV.
    #[arg(long)]
    pub export_data: bool,
    #[arg(long, default_value = "out/synth")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HvArgs {
    /// CSV of objective vectors; with a header, only `obj_*` columns are used if present.
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated reference point.
    #[arg(long = "ref", allow_hyphen_values = true)]
    pub reference: String,
    #[arg(long, value_enum, default_value = "max")]
    pub orientation: OrientationArg,
    #[arg(long, value_enum, default_value = "auto")]
    pub method: HvMethodArg,
    #[arg(long, default_value_t = lorpman::metrics::DEFAULT_MC_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// One of: rank, freeze-epoch, scale-s, lambda-o, lambda-p, window-b, epochs.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values to sweep.
    #[arg(long)]
    pub values: String,
    /// Seeds per value, counting up from the base seed.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[command(flatten)]
    pub problem: ProblemFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value = "out/ablate")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ChecksArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
