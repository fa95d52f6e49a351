//! `p3d`: probe training, correspondence and keypoint evaluation, and
//! cross-task analysis over frozen feature dumps.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use p3d_core::matching::RecallMode;
use p3d_core::{ModelFamily, ProbeTask};

use crate::config::{BinSpec, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "p3d", version, about = "Probe frozen visual features for 3D awareness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every random choice [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads
    #[arg(long, env = "P3D_JOBS", global = true)]
    pub jobs: Option<usize>,
}

/// Dataset location and report labels.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of `<item>.p3df` feature files [default: <manifest dir>/features]
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Model id written to reports [default: from the feature files]
    #[arg(long)]
    pub model: Option<String>,
    /// Domain id written to reports [default: manifest directory name]
    #[arg(long)]
    pub domain: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Depth,
    Normals,
}

impl From<TaskArg> for ProbeTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Depth => ProbeTask::Depth,
            TaskArg::Normals => ProbeTask::Normals,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FamilyArg {
    Encoder,
    DiffusionDecoder,
}

impl From<FamilyArg> for ModelFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Encoder => ModelFamily::Encoder,
            FamilyArg::DiffusionDecoder => ModelFamily::DiffusionDecoder,
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ProbeTrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    /// Probe hidden width [default: 128]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Training epochs [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Rescale each depth target to [0, 1] (object-centric data)
    #[arg(long)]
    pub normalize_depth: bool,
    /// Split used for training [default: train]
    #[arg(long)]
    pub train_split: Option<String>,
    /// Split evaluated after training [default: test]
    #[arg(long)]
    pub eval_split: Option<String>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ProbeEvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Probe checkpoint (.p3dc)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub normalize_depth: bool,
    /// Split to evaluate [default: test]
    #[arg(long)]
    pub eval_split: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Proj2d,
    Metric3d,
}

impl From<ModeArg> for RecallMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Proj2d => RecallMode::Proj2d,
            ModeArg::Metric3d => RecallMode::Metric3d,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ThresholdKind {
    Absolute,
    Pixels640,
    BboxFraction,
}

#[derive(Args, Clone, Debug, Default)]
pub struct CorrEvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Error measure [default: proj2d]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Recall threshold value (unit set by --threshold-kind)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// [default: pixels640 for proj2d, bbox-fraction for metric3d]
    #[arg(long, value_enum)]
    pub threshold_kind: Option<ThresholdKind>,
    /// Matches kept per pair [default: 1000]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// `scannet`, `navi` or comma-separated edges in degrees
    #[arg(long, value_parser = BinSpec::parse_flag)]
    pub bins: Option<BinSpec>,
    /// Blocks to evaluate [default: all blocks in the feature files]
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<u8>>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct SemanticEvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// PCK threshold as a fraction of the bounding box's longer side [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<u8>>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct AnalyzeArgs {
    /// Metric report CSVs to combine
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Task columns as task/domain/metric[/bin] [default: every task present]
    #[arg(long = "task")]
    pub tasks: Vec<String>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct SelftestArgs {
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FixtureKind {
    Probe,
    Correspondence,
    Semantic,
}

#[derive(Args, Clone, Debug)]
pub struct FixtureArgs {
    #[arg(value_enum)]
    pub kind: FixtureKind,
    /// Training images (probe fixture)
    #[arg(long, default_value_t = 64)]
    pub train: usize,
    /// Held-out images (probe fixture)
    #[arg(long, default_value_t = 16)]
    pub test: usize,
    /// Pair budget per class (semantic fixture)
    #[arg(long, default_value_t = 200)]
    pub pairs_per_class: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense probe and evaluate it
    ProbeTrain(ProbeTrainArgs),
    /// Evaluate a probe checkpoint
    ProbeEval(ProbeEvalArgs),
    /// Geometric correspondence recall per viewpoint bin
    CorrEval(CorrEvalArgs),
    /// Keypoint transfer PCK and confusion matrices
    SemanticEval(SemanticEvalArgs),
    /// Task correlations and model ratings from metric reports
    Analyze(AnalyzeArgs),
    /// Gradient checks and brute-force oracles
    Selftest(SelftestArgs),
    /// Write a synthetic dataset with feature files
    Fixture(FixtureArgs),
}

fn init_jobs(jobs: Option<usize>) -> CliResult {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: Command, common: Common) -> CliResult {
    let cfg = RunConfig::load(common.config.as_deref())?;
    init_jobs(common.jobs.or(cfg.jobs))?;
    match command {
        Command::ProbeTrain(a) => commands::probe::train(&a, &common, &cfg),
        Command::ProbeEval(a) => commands::probe::eval(&a, &common, &cfg),
        Command::CorrEval(a) => commands::correspondence::run(&a, &common, &cfg),
        Command::SemanticEval(a) => commands::semantic::run(&a, &common, &cfg),
        Command::Analyze(a) => commands::analyze::run(&a, &common, &cfg),
        Command::Selftest(a) => commands::selftest::run(&a, &common),
        Command::Fixture(a) => commands::fixture::run(&a, &common, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command, cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
