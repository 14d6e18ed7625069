//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use laps_core::gradcheck::GradTarget;
use laps_core::model::{AttentionKind, ShiftKind};
use laps_core::DType;

#[derive(Debug, Parser)]
#[command(
    name = "laps",
    version,
    about = "Leap attention with periodic shift: forward runs, cost reports, gradient checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the frame pairing for one pyramid level.
    Pairs(PairsArgs),
    /// Run the model forward and write a report.
    Forward(ForwardArgs),
    /// Analytic and instrumented MAC counts against the 2d baseline.
    Flops(FlopsArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a seeded standard-normal tensor fixture.
    GenFixture(GenFixtureArgs),
    /// Write freshly initialized parameters as a named-tensor archive.
    InitParams(InitParamsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "2d")]
    Spatial2D,
    #[value(name = "3d")]
    Joint3D,
    Leap,
}

impl From<ModeArg> for AttentionKind {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Spatial2D => AttentionKind::Spatial2D,
            ModeArg::Joint3D => AttentionKind::Joint3D,
            ModeArg::Leap => AttentionKind::Leap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShiftArg {
    None,
    Plain,
    Periodic,
}

impl From<ShiftArg> for ShiftKind {
    fn from(s: ShiftArg) -> Self {
        match s {
            ShiftArg::None => ShiftKind::None,
            ShiftArg::Plain => ShiftKind::Plain,
            ShiftArg::Periodic => ShiftKind::Periodic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Attention,
    Shift,
    Mlp,
    Encoder,
    Model,
    All,
}

impl TargetArg {
    pub fn targets(self) -> Vec<GradTarget> {
        match self {
            TargetArg::Attention => vec![GradTarget::Attention],
            TargetArg::Shift => vec![GradTarget::Shift],
            TargetArg::Mlp => vec![GradTarget::Mlp],
            TargetArg::Encoder => vec![GradTarget::Encoder],
            TargetArg::Model => vec![GradTarget::Model],
            TargetArg::All => GradTarget::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Clip length T.
    #[arg(long)]
    pub frames: usize,
    /// Pyramid level R; the pair gap is T / 2^R.
    #[arg(long)]
    pub pyramid: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Options shared by commands that load a model config.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Model config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's attention layout.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Override the config's temporal shift.
    #[arg(long, value_enum)]
    pub shift: Option<ShiftArg>,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ConfigArgs,
    /// Input clip fixture `[T, H, W, 3]`; generated from the seed when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Parameter archive; initialized from the seed when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Parameters use this seed, a generated clip uses seed + 1.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub model: ConfigArgs,
    /// Skip the instrumented forward pass.
    #[arg(long)]
    pub analytic_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ConfigArgs,
    #[arg(long, value_enum, default_value_t = TargetArg::All)]
    pub target: TargetArg,
    /// Pass threshold; defaults to 1e-5 for attention, shift and mlp and
    /// 1e-4 for encoder and model.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = laps_core::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenFixtureArgs {
    /// Comma-separated extents, e.g. 4,8,8,3.
    #[arg(long, value_delimiter = ',', required = true)]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitParamsArgs {
    #[command(flatten)]
    pub model: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,
    #[arg(long)]
    pub out: PathBuf,
}
