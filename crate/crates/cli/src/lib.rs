//! The `affect` command line: every pipeline stage as a subcommand over
//! manifests and feature files.

mod commands;
mod table;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use affect_core::training::{parse_pairs, Task, TrainConfig};
use affect_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use table::markdown_table;

#[derive(Debug, Parser)]
#[command(
    name = "affect",
    version,
    about = "Valence/arousal stacking and action-unit detection pipeline"
)]
pub struct Cli {
    /// Log progress at info level (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature set and its manifest.
    Synth(SynthArgs),
    /// Assign K folds to the training videos of a manifest.
    Split(SplitArgs),
    /// Train stage-1 regressors, one per held-out fold.
    TrainStage1(Stage1Args),
    /// Run every fold model over every video and write fold score vectors.
    InferFolds(InferArgs),
    /// Train the stage-2 stacker on fold score vectors.
    TrainStage2(TrainArgs),
    /// Train the action-unit detector.
    TrainAu(TrainArgs),
    /// Score a checkpoint on one split of a manifest.
    Evaluate(EvaluateArgs),
    /// Finite-difference audit of every layer's gradients.
    GradCheck(GradCheckArgs),
    /// Per-fold and fold-averaged CCC table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelKind {
    Va,
    Au,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    pub videos: usize,
    #[arg(long, default_value_t = 400)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Label kind to synthesize.
    #[arg(long, value_enum, default_value_t = LabelKind::Va)]
    pub labels: LabelKind,
    /// How many of the last videos go to the validation split.
    #[arg(long, default_value_t = 0)]
    pub val_videos: usize,
    /// Output directory for `.afb1` files and `manifest.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the updated manifest (default: in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Options shared by the training subcommands.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, `key=value`; later ones win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory for checkpoints and the epoch log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Stage1Args {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Train only this held-out fold (default: all folds).
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `fold{k}/best.afck` from `train-stage1`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Write per-frame predictions as a score CSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `fold{k}/best.afck` from `train-stage1`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolves a training config: task defaults, then the file, then
/// `key=value` overrides.
pub fn load_config(path: Option<&Path>, task: Task, overrides: &[String]) -> Result<TrainConfig> {
    let mut pairs = vec![("task".to_string(), task.to_string())];
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        pairs.extend(
            parse_pairs(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        );
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    TrainConfig::from_pairs(&pairs)
}

/// Exit status for a failed command: 2 for filesystem trouble, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_io() {
        2
    } else {
        1
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match commands::dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
