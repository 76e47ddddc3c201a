//! `fairproxy` command-line interface.
//!
//! [`run`] parses arguments, dispatches to a subcommand and maps failures to
//! exit codes: 0 on success, 1 on validation errors, 2 on I/O errors.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod figures;
mod manifest;
mod proxy;
pub mod split;

pub use proxy::ProxySpec;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fairproxy::Error),
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid TOML in {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_io() => 2,
            CliError::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fairproxy", version, about = "Race proxies and disparity estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic population and emit tables, a sample and the exact joint table.
    Simulate(SimulateArgs),
    /// Validate input tables and summarize them.
    IngestCheck(IngestArgs),
    /// BISG probabilities for every record of a dataset.
    PredictBisg(PredictBisgArgs),
    /// Fit cBISG posteriors from labeled data.
    FitCbisg(FitCbisgArgs),
    /// Fit MICSG on top of a base proxy.
    FitMicsg(FitMicsgArgs),
    /// MICSG probabilities for every record of a dataset.
    PredictMicsg(PredictMicsgArgs),
    /// Per-race positive rates and disparities.
    Estimate(EstimateArgs),
    /// Mean-consistency report and binned violation profiles.
    Diagnose(DiagnoseArgs),
    /// Population-exact sweep of the consistency/bias bounds.
    VerifyTheorems(VerifyArgs),
    /// Tidy plot data from estimate/diagnose reports.
    EmitFigureData(FigureArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TableArgs {
    /// Census surname counts (`surname,<race>...`).
    #[arg(long)]
    pub surnames: Option<PathBuf>,
    /// Census geography counts (`geo_id,<race>...`).
    #[arg(long)]
    pub geo: Option<PathBuf>,
    /// Comma-separated race labels; defaults to the table header order.
    #[arg(long)]
    pub races: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    /// Seed for stochastic steps; falls back to FAIRPROXY_SEED.
    #[arg(long, env = "FAIRPROXY_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    Train,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Keep only one side of a seeded hash split by record id.
    #[arg(long)]
    pub split_fraction: Option<f64>,
    /// Which side of the split to keep.
    #[arg(long, value_enum, default_value = "train")]
    pub split_part: SplitPart,
}

#[derive(Debug, Clone, Args)]
pub struct ManifestArg {
    /// Run-manifest path; defaults next to the primary output.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML or JSON simulator configuration; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write train.csv and test.csv with this training fraction.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub tables: TableArgs,
    #[arg(long)]
    pub supplemental: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct PredictBisgArgs {
    #[command(flatten)]
    pub tables: TableArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TuningChoice {
    Bayes,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AveragingChoice {
    WithinContext,
    AllRecords,
}

impl From<AveragingChoice> for fairproxy::estimators::ContextAveraging {
    fn from(a: AveragingChoice) -> Self {
        match a {
            AveragingChoice::WithinContext => Self::WithinContext,
            AveragingChoice::AllRecords => Self::AllRecords,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitCbisgArgs {
    #[command(flatten)]
    pub tables: TableArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    /// A value in [0, 1], or `tune` for a per-geography grid search.
    #[arg(long, default_value = "0")]
    pub eta: String,
    /// η grid for tuning: `start:stop:step` or a comma-separated list.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_enum, default_value = "bayes")]
    pub tuning_estimator: TuningChoice,
    #[arg(long, value_enum, default_value = "within-context")]
    pub averaging: AveragingChoice,
    /// η for geographies without training records when tuning.
    #[arg(long, default_value_t = 0.0)]
    pub default_eta: f64,
    #[arg(long)]
    pub model_out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaseEncodingChoice {
    Probability,
    LogProbability,
}

#[derive(Debug, Args)]
pub struct FitMicsgArgs {
    /// `bisg` or `cbisg:<model.csv>`.
    #[arg(long)]
    pub base: String,
    #[command(flatten)]
    pub tables: TableArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value = "probability")]
    pub base_encoding: BaseEncodingChoice,
    /// Weight CSV; model metadata goes to `<path>.json`.
    #[arg(long)]
    pub model_out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct PredictMicsgArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// `0`, `1` or `observed`.
    #[arg(long, default_value = "observed")]
    pub context: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodChoice {
    True,
    Weighted,
    Bayes,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long, value_enum)]
    pub method: MethodChoice,
    /// `bisg`, `cbisg:<model.csv>`, `micsg:<weights.csv>` or `oracle:<joint_table.csv>`.
    #[arg(long)]
    pub proxy: Option<String>,
    #[command(flatten)]
    pub tables: TableArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, value_enum, default_value = "within-context")]
    pub averaging: AveragingChoice,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub proxy: String,
    #[command(flatten)]
    pub tables: TableArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 8)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "within-context")]
    pub averaging: AveragingChoice,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Base simulator configuration for the sweep.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Include every individual (race, ε) check, not just per-instance results.
    #[arg(long)]
    pub details: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct FigureArgs {
    /// Report JSON files written by `estimate` or `diagnose`.
    #[arg(long, num_args = 0..)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
