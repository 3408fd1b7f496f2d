//! Command-line entry point: validate, saliency, train, eval, predict, report.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use config::{env_overrides, resolve, AppConfig, DataConfig, EvalConfig, Overrides, CACHE_DIR_ENV};

use crate::evaluation::{EvalError, PatchPolicy};
use crate::manifest::{FetchError, ManifestError};
use crate::model::ModelError;
use crate::pipeline::PipelineError;
use crate::saliency::SaliencyError;
use crate::training::TrainError;
use crate::transforms::TransformError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// File name of the echoed configuration in output directories.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FetchError> for CliError {
    fn from(e: FetchError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TransformError> for CliError {
    fn from(e: TransformError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SaliencyError> for CliError {
    fn from(e: SaliencyError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::UnknownBackbone(_) => CliError::Usage(e.to_string()),
            ModelError::Checkpoint { .. } | ModelError::Version { .. } | ModelError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => p.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Transform(t) => t.into(),
            EvalError::Parse { .. } | EvalError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::EmptyData | TrainError::EmptyHistogram => CliError::Data(e.to_string()),
            TrainError::Pipeline(p) => p.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(v) => v.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "salrgb", version, about = "Saliency-augmented photographic style classification")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Override any config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// `ava14` or a class-list file.
    #[arg(long)]
    pub taxonomy: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub image_root: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub saliency_root: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check that every manifest record has a decodable image and saliency map.
    Validate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Generate saliency maps for the records of a manifest.
    Saliency {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Regenerate maps that already exist.
        #[arg(long)]
        overwrite: bool,
    },
    /// Fine-tune a model on the train split, selecting on the val split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the last checkpoint in the checkpoint directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a split and write predictions and reports.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        output_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        patches: Option<PolicyArg>,
    },
    /// Rank the style classes of one image.
    Predict {
        image: PathBuf,
        /// Saliency map of the image; generated when omitted.
        #[arg(long, value_name = "FILE")]
        saliency: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        patches: Option<PolicyArg>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Recompute reports from a prediction dump.
    Report {
        predictions: PathBuf,
        /// Second dump whose MAP serves as the baseline for relative improvements.
        #[arg(long, value_name = "FILE")]
        baseline: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<String>,
        #[arg(long, value_name = "DIR")]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Grid,
    Random,
    Center,
}

impl From<PolicyArg> for PatchPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Grid => PatchPolicy::Grid,
            PolicyArg::Random => PatchPolicy::Random,
            PolicyArg::Center => PatchPolicy::Center,
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| commands::dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Process entry point.
pub fn main() -> ! {
    std::process::exit(run(std::env::args_os()))
}
