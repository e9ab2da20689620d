//! Command-line surface. Every flag can also be set through a `CIST_`
//! environment variable.

use std::path::PathBuf;

use cist_core::Method;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "cist", version, about = "Sample-wise adaptive temperature distillation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Sample a Gaussian-mixture dataset.
    GenData(GenDataArgs),
    /// Train a teacher with cross-entropy.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Write a model's logits on one split as a logit dump.
    ExportLogits(ExportLogitsArgs),
    /// Sweep ρ over teacher logits and report entropy statistics.
    CalibrateRho(CalibrateArgs),
    /// Entropy distribution of teacher soft labels under one policy.
    AnalyzeEntropy(AnalyzeArgs),
    /// Run every numerical check; exits 3 on any failure.
    Verify(VerifyArgs),
    /// Compare methods over several seeds on the synthetic benchmark.
    RunAblation(AblationArgs),
    /// Repeat the command recorded in a manifest.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainTeacher(_) => "train-teacher",
            Command::Distill(_) => "distill",
            Command::ExportLogits(_) => "export-logits",
            Command::CalibrateRho(_) => "calibrate-rho",
            Command::AnalyzeEntropy(_) => "analyze-entropy",
            Command::Verify(_) => "verify",
            Command::RunAblation(_) => "run-ablation",
            Command::Rerun(_) => "rerun",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OutputArgs {
    /// Output directory; created if missing.
    #[arg(long, env = "CIST_OUT")]
    pub out: PathBuf,
    /// Overwrite existing outputs. Not recorded in the manifest.
    #[arg(long, env = "CIST_FORCE")]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 20, env = "CIST_CLASSES")]
    pub classes: usize,
    #[arg(long, default_value_t = 16, env = "CIST_DIMS")]
    pub dims: usize,
    #[arg(long, default_value_t = 200, env = "CIST_PER_CLASS")]
    pub per_class: usize,
    /// Per-dimension noise standard deviation.
    #[arg(long, default_value_t = 1.0, env = "CIST_SPREAD")]
    pub spread: f64,
    /// In [0, 1); larger values pull class means together.
    #[arg(long, env = "CIST_OVERLAP")]
    pub overlap: Option<f64>,
    #[arg(long, default_value_t = 0, env = "CIST_SEED")]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, env = "CIST_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 64, env = "CIST_BATCH_SIZE")]
    pub batch_size: usize,
    /// Initial learning rate, decayed by 0.1 at 5/8, 3/4 and 7/8 of training.
    #[arg(long, env = "CIST_LR")]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.9, env = "CIST_MOMENTUM")]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4, env = "CIST_WEIGHT_DECAY")]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1, env = "CIST_EVAL_EVERY")]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0, env = "CIST_SEED")]
    pub seed: u64,
    /// Also write per-epoch wall-clock seconds to timing.csv.
    #[arg(long, env = "CIST_TIMING")]
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainTeacherArgs {
    /// Dataset CSV.
    #[arg(long, env = "CIST_DATA")]
    pub data: PathBuf,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', env = "CIST_HIDDEN")]
    pub hidden: Option<Vec<usize>>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LossArgs {
    #[arg(long, value_parser = parse_method, env = "CIST_METHOD")]
    pub method: Method,
    /// Entropy control constant for adaptive temperatures.
    #[arg(long, env = "CIST_RHO")]
    pub rho: Option<f64>,
    /// Fixed temperature.
    #[arg(long, env = "CIST_TAU")]
    pub tau: Option<f64>,
    #[arg(long, env = "CIST_LAMBDA_KL")]
    pub lambda_kl: Option<f64>,
    #[arg(long, env = "CIST_LAMBDA_CE")]
    pub lambda_ce: Option<f64>,
    /// Fraction of training samples treated as entropy outliers.
    #[arg(long, env = "CIST_ENTOUT_FRACTION")]
    pub entout_fraction: Option<f64>,
    /// Temperature increase for entropy outliers.
    #[arg(long, env = "CIST_ENTOUT_DELTA")]
    pub entout_delta: Option<f64>,
}

pub fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: cist_core::Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DistillArgs {
    #[arg(long, env = "CIST_DATA")]
    pub data: PathBuf,
    /// Teacher checkpoint.
    #[arg(long, env = "CIST_TEACHER")]
    pub teacher: PathBuf,
    #[arg(long, value_delimiter = ',', env = "CIST_HIDDEN")]
    pub hidden: Option<Vec<usize>>,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for cist_core::data::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

/// Where teacher logits come from: a dump, or a checkpoint applied to a
/// dataset split.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LogitSource {
    #[arg(long, env = "CIST_LOGITS", conflicts_with_all = ["teacher", "data"])]
    pub logits: Option<PathBuf>,
    #[arg(long, env = "CIST_TEACHER", requires = "data")]
    pub teacher: Option<PathBuf>,
    #[arg(long, env = "CIST_DATA", requires = "teacher")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train, env = "CIST_SPLIT")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ExportLogitsArgs {
    #[arg(long, env = "CIST_MODEL")]
    pub model: PathBuf,
    #[arg(long, env = "CIST_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train, env = "CIST_SPLIT")]
    pub split: SplitArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub source: LogitSource,
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 3.0, 4.0, 5.0], env = "CIST_CANDIDATES")]
    pub candidates: Vec<f64>,
    /// Number of rows drawn (without replacement) for the sweep.
    #[arg(long, default_value_t = 512, env = "CIST_SUBSET")]
    pub subset: usize,
    #[arg(long, default_value_t = 0, env = "CIST_SEED")]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub source: LogitSource,
    #[arg(long, value_enum, env = "CIST_POLICY")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 4.0, env = "CIST_TAU")]
    pub tau: f64,
    #[arg(long, default_value_t = 3.0, env = "CIST_RHO")]
    pub rho: f64,
    #[arg(long, default_value_t = 40, env = "CIST_BINS")]
    pub bins: usize,
    #[arg(long, default_value_t = 0.05, env = "CIST_OUTLIER_QUANTILE")]
    pub outlier_quantile: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0, env = "CIST_SEED")]
    pub seed: u64,
    /// Dominated pairs per margin.
    #[arg(long, default_value_t = 1000, env = "CIST_PAIRS")]
    pub pairs: usize,
    #[arg(long, default_value_t = 10, env = "CIST_CLASSES")]
    pub classes: usize,
    #[arg(long, default_value_t = 3.0, env = "CIST_RHO")]
    pub rho: f64,
    /// Corrupt analytic gradients to confirm the checks can fail.
    #[arg(long, env = "CIST_FAULT_INJECTION")]
    pub fault_injection: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteArg {
    /// kd, cist-no-temp, cist-no-reweight, cist.
    Components,
    /// kd, kd-entout-ce, kd-entout-ht.
    Entout,
    /// Every method including ce.
    All,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AblationArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All, env = "CIST_SUITE")]
    pub suite: SuiteArg,
    /// Explicit method list; overrides --suite.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, env = "CIST_METHODS")]
    pub methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4], env = "CIST_SEEDS")]
    pub seeds: Vec<u64>,
    /// Seed of the benchmark data, shared by every run.
    #[arg(long, default_value_t = 0, env = "CIST_DATA_SEED")]
    pub data_seed: u64,
    #[arg(long, env = "CIST_OVERLAP")]
    pub overlap: Option<f64>,
    #[arg(long, env = "CIST_TEACHER_EPOCHS")]
    pub teacher_epochs: Option<usize>,
    #[arg(long, env = "CIST_STUDENT_EPOCHS")]
    pub student_epochs: Option<usize>,
    /// Worker threads.
    #[arg(long, default_value_t = 1, env = "CIST_JOBS")]
    pub jobs: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long, env = "CIST_MANIFEST")]
    pub manifest: PathBuf,
    /// Overwrite the outputs recorded in the manifest.
    #[arg(long, env = "CIST_FORCE")]
    pub force: bool,
}
