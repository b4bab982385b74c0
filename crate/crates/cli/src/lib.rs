//! The `mmcc` command line: dataset synthesis and splitting, training,
//! evaluation, single-image segmentation and Grad-CAM, experiment protocols,
//! and report tables.

mod commands;
mod config;
mod overlay;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mmcc::data::{DataError, Difficulty};
use mmcc::model::{CamLayer, ModelError};
use mmcc::training::{Protocol, TrainingError};

pub use config::{DataSection, Overrides, Preset, RunConfig, SplitKindName, SplitSection, SynthSection, TrainSection};
pub use overlay::{overlay, OverlayClass};

/// A failure with its exit status: 1 usage, 2 data, 3 numeric.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidArgument(_) | DataError::TooFewIds { .. } => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainingError::InvalidPlan(_)
            | TrainingError::UnknownProtocol(_)
            | TrainingError::IncompatibleFolds { .. } => CliError::Usage(e.to_string()),
            TrainingError::Data(e) => e.into(),
            TrainingError::Model(e) => e.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mmcc",
    version,
    about = "Polyp segmentation network: data, training, evaluation, experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration and output flags shared by most commands.
#[derive(Clone, Debug, Args)]
pub struct Common {
    /// JSON run configuration merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration before `--config` is applied.
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic polyp dataset (images/ and masks/).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        difficulty: Option<Difficulty>,
    },
    /// Write a split file assigning every sample id a role.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_split_kind)]
        kind: Option<SplitKindName>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train on the train role with early stopping on the val role.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; synthetic data from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Continue from a checkpoint with its own model, plan, and optimizer
        /// state; `--epochs` raises the epoch budget.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-image and mean metrics of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Role to evaluate with `--split`: train, val, test, fold-k, or all.
        #[arg(long, default_value = "test")]
        role: String,
    },
    /// Segment one image: mask PGM, probability PGM, and overlay PPM.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask for the overlay colors.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM heatmap of one image as a PGM.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_parser = parse_layer, default_value = "stage_a")]
        layer: CamLayer,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment protocol and write its tables and run summaries.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        /// holdout, kfold5, multirun10, ablate, loss_sweep, optimizer_sweep, or lr_sweep.
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
    },
    /// Aggregate run summaries below a directory into result tables.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split_kind(s: &str) -> Result<SplitKindName, String> {
    match s {
        "table1" => Ok(SplitKindName::Table1),
        "kfold" => Ok(SplitKindName::Kfold),
        _ => Err(format!("unknown split kind `{s}` (expected table1 or kfold)")),
    }
}

fn parse_layer(s: &str) -> Result<CamLayer, String> {
    CamLayer::ALL
        .into_iter()
        .find(|l| l.name() == s)
        .ok_or_else(|| format!("unknown layer `{s}` (expected stem, stage_a, stage_b, or stage_c)"))
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: TrainingError| e.to_string())
}

/// Parse `argv` (program name first), run the command, and return the exit status.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first} (see `mmcc --help`)");
            return 1;
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
