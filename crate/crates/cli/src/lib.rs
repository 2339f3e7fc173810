//! `expres` command line: argument parsing, exit codes and error reports.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric
//! failure, 4 I/O or file-format error. Failures print one JSON object on
//! stderr.

mod commands;
mod output;

use clap::{Args, Parser, Subcommand, ValueEnum};
use expres::Error as CoreError;
use serde_json::json;
use std::path::PathBuf;

pub use commands::{train_run, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Csv(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Contract(_) | CoreError::Shape { .. } => 2,
                CoreError::Numeric { .. } => 3,
                CoreError::Io(_) | CoreError::Json(_) | CoreError::Format(_) | CoreError::Load(_) => 4,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Csv(_) => "io",
            CliError::Core(e) => match e {
                CoreError::Config(_) => "config",
                CoreError::Contract(_) => "contract",
                CoreError::Shape { .. } => "shape",
                CoreError::Numeric { .. } => "numeric",
                CoreError::Io(_) => "io",
                CoreError::Json(_) => "json",
                CoreError::Format(_) => "format",
                CoreError::Load(_) => "load",
            },
        }
    }

    /// Machine-readable report printed on failure.
    pub fn report(&self) -> serde_json::Value {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Core(CoreError::Config(list)) => v["violations"] = json!(list),
            CliError::Core(CoreError::Numeric { at, .. }) | CliError::Core(CoreError::Shape { at, .. }) => {
                v["at"] = json!(at)
            }
            CliError::Core(CoreError::Load(r)) => {
                v["missing"] = json!(r.missing);
                v["unexpected"] = json!(r.unexpected);
                v["misshaped"] = json!(r.misshaped.iter().map(|(n, _, _)| n).collect::<Vec<_>>());
            }
            _ => {}
        }
        v
    }
}

/// Flags shared by the run commands.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompt count(s), comma separated.
    #[arg(long = "M", value_delimiter = ',')]
    pub m: Vec<usize>,
    /// Propagation cutoff layer.
    #[arg(long)]
    pub cutoff: Option<usize>,
    /// Residual sites, comma separated (`Att`, `MLP`, `QKV` expand).
    #[arg(long)]
    pub sites: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Prompts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateKind {
    Propagation,
    Sites,
    StartLayer,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured adaptation.
    Train(Common),
    /// Evaluate a trainable checkpoint on the validation (or training) set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Seeded few-shot segmentation episodes.
    Episodes(Common),
    /// Finite-difference check of every trainable tensor.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f32,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f32,
    },
    /// Trainable-parameter and MAC accounting over methods and prompt counts.
    Account {
        #[arg(long, default_value = "vitb16")]
        vit: String,
        #[arg(long, default_value_t = 100)]
        classes: usize,
        #[arg(long = "M", value_delimiter = ',', default_values_t = [1usize, 100])]
        m: Vec<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train once per value of a swept setting.
    Sweep {
        what: SweepKind,
        #[command(flatten)]
        common: Common,
    },
    /// Ablations over propagation depth, residual sites or start layer.
    Ablate {
        what: AblateKind,
        #[command(flatten)]
        common: Common,
    },
    /// Prompt-to-patch attention maps.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training-set sample to run.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Parser)]
#[command(name = "expres", version, about = "Residual prompt tuning for vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.report());
            return err.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.report());
            e.exit_code()
        }
    }
}
