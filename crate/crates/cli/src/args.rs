use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcct_core::data::DatasetFormat;
use mcct_core::{Method, Mode, SolverConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "mcct",
    version,
    about = "Monotone post-hoc calibration of classifier logits"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for splits, subsamples and the synthetic generator.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for parallel experiment cells (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Dataset file format; inferred from the extension when omitted.
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
}

impl GlobalArgs {
    pub fn format_for(&self, path: &Path) -> DatasetFormat {
        match self.format {
            Some(FormatArg::Csv) => DatasetFormat::Csv,
            Some(FormatArg::Bin) => DatasetFormat::RawBinary,
            None => DatasetFormat::from_path(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Bin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Direct,
    Inverse,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Direct => Mode::Direct,
            ModeArg::Inverse => Mode::Inverse,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a calibrator on a labelled logit file.
    Fit(FitArgs),
    /// Write calibrated probabilities for a logit file.
    Apply(ApplyArgs),
    /// Score a fitted calibrator on a labelled logit file.
    Eval(EvalArgs),
    /// Fit and score several methods over repeated calibration/test splits.
    Compare(CompareArgs),
    /// Calibration error as a function of calibration-set size.
    SweepSize(SweepSizeArgs),
    /// Calibration error and fit time as a function of the retained ranks.
    SweepTopk(SweepTopkArgs),
    /// Generate a synthetic miscalibrated dataset.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// JSON file with solver settings; explicit flags take precedence.
    #[arg(long)]
    pub solver_config: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub stationarity_tol: Option<f64>,
    #[arg(long)]
    pub constraint_tol: Option<f64>,
    #[arg(long)]
    pub w_floor: Option<f64>,
}

impl SolverArgs {
    pub fn resolve(&self) -> CliResult<SolverConfig> {
        let mut cfg = match &self.solver_config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Usage(format!("solver config {}: {e}", path.display()))
                })?
            }
            None => SolverConfig::default(),
        };
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.stationarity_tol {
            cfg.stationarity_tol = v;
        }
        if let Some(v) = self.constraint_tol {
            cfg.constraint_tol = v;
        }
        if let Some(v) = self.w_floor {
            cfg.w_floor = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// Keep only the top k ranks (monotone maps only).
    #[arg(long)]
    pub topk: Option<usize>,
    /// Bins for histogram binning.
    #[arg(long, default_value_t = 15)]
    pub hb_bins: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Probability CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    /// Metric report JSON; the reliability table goes beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated methods (default: all).
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    /// Calibration share of each split.
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    #[arg(long)]
    pub topk: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

impl ExperimentArgs {
    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| Method::ALL.to_vec())
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Repetitions; run r uses split seed `seed + r`.
    #[arg(long, default_value_t = 10)]
    pub runs: u64,
    /// Output prefix: writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepSizeArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Calibration-set fractions in (0, 1].
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    )]
    pub fractions: Vec<f64>,
    /// Number of seeds; seed s uses split seed `seed + s`.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Output prefix: writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepTopkArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub kvalues: Vec<usize>,
    #[arg(long, value_enum, default_value = "direct")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    /// Fits per k; the fastest is reported.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Output prefix: writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.5)]
    pub overconfidence: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sd: f64,
    /// Dataset path; true probabilities go to PATH.probs.csv.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: mcct_core::Error| e.to_string())
}
