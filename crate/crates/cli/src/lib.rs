//! Command-line driver for zero-shot detection alignment experiments on
//! synthetic worlds.

// Range checks are written as `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use zsd_align_core::splits::shipped_templates;
use zsd_align_core::train::TrainMode;

use crate::commands::{EvalArgs, EvalMode, Subset, TrainArgs};
use crate::config::ExperimentConfig;
use crate::error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "zsd-align",
    version,
    about = "Zero-shot detection with text-aligned embeddings"
)]
pub struct Cli {
    /// JSON experiment configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `train.base_lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "detection_only")]
    DetectionOnly,
    Joint,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::DetectionOnly => TrainMode::DetectionOnly,
            ModeArg::Joint => TrainMode::Joint,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a unit-norm classifier from text embeddings.
    BuildClassifier {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Embeddings are keyed by prompt; average each class over the bundled templates.
        #[arg(long)]
        templates: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset directory.
    GenWorld {
        #[arg(long)]
        out: PathBuf,
        /// Split file naming the unseen classes.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Mark the rarest classes of every superclass as unseen.
    Split {
        /// Class registry with superclasses and frequencies; bundled COCO metadata when absent.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch metrics as JSON lines; `<out>.metrics.jsonl` when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out images.
    Evaluate {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
        /// Per-class precision/recall points as CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Write detections for held-out images as JSON lines.
    Infer {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
pub struct Target {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "unseen")]
    pub subset: Subset,
    #[arg(long, value_enum, default_value = "zsd")]
    pub mode: EvalMode,
    /// Annotation file to use instead of the dataset's test images.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

impl Target {
    fn args(&self) -> EvalArgs<'_> {
        EvalArgs {
            checkpoint: &self.checkpoint,
            data: &self.data,
            subset: self.subset,
            mode: self.mode,
            annotations: self.annotations.as_deref(),
        }
    }
}

/// Runs a parsed command line. `env_seed` is the value of the seed
/// environment variable, if set.
pub fn run(cli: &Cli, env_seed: Option<&str>) -> CliResult<String> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides, env_seed)?;
    match &cli.command {
        Command::BuildClassifier {
            embeddings,
            registry,
            templates,
            out,
        } => {
            let t = templates.then(shipped_templates);
            commands::build_classifier_cmd(embeddings, registry, t.as_ref(), out)
        }
        Command::GenWorld { out, split } => commands::gen_world_cmd(&cfg, out, split.as_deref()),
        Command::Split {
            registry,
            fraction,
            out,
        } => commands::split_cmd(registry.as_deref(), *fraction, out),
        Command::Train {
            data,
            mode,
            out,
            resume,
            log,
        } => commands::train_cmd(
            &cfg,
            &TrainArgs {
                data,
                mode: (*mode).into(),
                out,
                resume: resume.as_deref(),
                log: log.as_deref(),
            },
        ),
        Command::Evaluate {
            target,
            out,
            pr_csv,
        } => commands::evaluate_cmd(&cfg, &target.args(), out, pr_csv.as_deref()),
        Command::Infer { target, out } => commands::infer_cmd(&cfg, &target.args(), out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Help and version requests exit 0; malformed command lines exit 1.
pub fn main_with<I, T>(args: I, env_seed: Option<&str>) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
        }
    };
    match run(&cli, env_seed) {
        Ok(summary) => {
            println!("{summary}");
            exit::OK
        }
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            code
        }
    }
}
