//! `zsl`: synthetic data, splitting, training, evaluation, prediction and
//! gradient checks for the zero-shot classifier.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure,
//! 4 artifact mismatch (including a missing checkpoint).

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "zsl", version, about = "Zero-shot classifier pipeline")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (features, class vectors, manifest).
    Synth(SynthArgs),
    /// Split the classes that have class vectors into seen and unseen.
    Split(SplitArgs),
    /// Train on the seen classes and write checkpoints.
    Train(TrainArgs),
    /// Top-k evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Rank class labels for one sample.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

/// Input files. Each defaults to a fixed name inside `--data-dir`.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, env = "ZSL_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub class_vectors: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split JSON written by `zsl split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

pub const IMAGES_FILE: &str = "images.zslf";
pub const TEXTS_FILE: &str = "texts.zslf";
pub const CLASS_VECTORS_FILE: &str = "class_vectors.zslf";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";
pub const RUN_DIR: &str = "run";
pub const MODEL_FILE: &str = "model.zslc";
pub const BEST_FILE: &str = "best.zslc";

impl DataArgs {
    fn pick(&self, over: &Option<PathBuf>, name: &str) -> PathBuf {
        over.clone().unwrap_or_else(|| self.data_dir.join(name))
    }
    pub fn images(&self) -> PathBuf {
        self.pick(&self.images, IMAGES_FILE)
    }
    pub fn texts(&self) -> PathBuf {
        self.pick(&self.texts, TEXTS_FILE)
    }
    pub fn class_vectors(&self) -> PathBuf {
        self.pick(&self.class_vectors, CLASS_VECTORS_FILE)
    }
    pub fn manifest(&self) -> PathBuf {
        self.pick(&self.manifest, MANIFEST_FILE)
    }
    pub fn split(&self) -> PathBuf {
        self.pick(&self.split, SPLIT_FILE)
    }
    pub fn run_dir(&self) -> PathBuf {
        self.data_dir.join(RUN_DIR)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 30)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub image_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub text_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub sem_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Nonnegative class vectors (for a ReLU semantic layer).
    #[arg(long)]
    pub nonnegative: bool,
    /// Output directory; defaults to the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "ZSL_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 25)]
    pub unseen: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; defaults to `split.json` in the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemanticActivation {
    Relu,
    Linear,
}

/// Architecture overrides; anything unset follows the default taper.
#[derive(Args, Debug, Clone)]
pub struct ArchArgs {
    /// Comma-separated reducer widths, e.g. `2048,1536,1024`; empty for none.
    #[arg(long)]
    pub reducer: Option<String>,
    /// Comma-separated trunk hidden widths (the semantic layer is implied).
    #[arg(long)]
    pub trunk: Option<String>,
    #[arg(long, value_enum, default_value_t = SemanticActivation::Relu)]
    pub semantic_activation: SemanticActivation,
    #[arg(long)]
    pub reducer_dropout: Option<f32>,
    #[arg(long)]
    pub trunk_dropout: Option<f32>,
    #[arg(long)]
    pub no_batchnorm: bool,
    /// Let SGD update the class-vector output layer.
    #[arg(long)]
    pub trainable_output: bool,
    /// Weight-initialization seed; defaults to `--seed`.
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Epochs without loss improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; defaults to `run` inside the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Unseen rows against the unseen class vectors (all classes also reported).
    Unseen,
    /// Unseen rows against every class vector.
    All,
    /// Stratified holdout of the seen rows; trains a fresh model per repeat.
    Seen,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalMode::Unseen)]
    pub mode: EvalMode,
    #[arg(long, default_value = "1,5,10")]
    pub ks: String,
    #[arg(long, default_value_t = 0.3)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seen mode only: repeat with seeds seed, seed+1, … and summarize.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// L2-normalize class vectors and predictions before ranking.
    #[arg(long)]
    pub normalize: bool,
    /// Rank with an exhaustive scan instead of the KD-tree.
    #[arg(long)]
    pub brute_force: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Include per-sample ranked labels in text output.
    #[arg(long)]
    pub samples: bool,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seen mode: optimizer settings for the retrained model.
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Candidates {
    All,
    Seen,
    Unseen,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image id in the image feature file.
    #[arg(long, conflicts_with = "image_vector")]
    pub image_id: Option<String>,
    /// Text document id; defaults to the text of the image's manifest class.
    #[arg(long, conflicts_with = "text_vector")]
    pub text_id: Option<String>,
    /// Raw comma-separated image features.
    #[arg(long, allow_hyphen_values = true)]
    pub image_vector: Option<String>,
    /// Raw comma-separated text features.
    #[arg(long, allow_hyphen_values = true)]
    pub text_vector: Option<String>,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Candidates::All)]
    pub candidates: Candidates,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Use batch statistics in batchnorm instead of running statistics.
    #[arg(long)]
    pub batch_stats: bool,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

/// An error carrying its exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn exit(code: u8, message: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        message: message.into(),
    }
    .into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use zsl_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numeric(_) | E::Diverged { .. } => EXIT_NUMERIC,
                E::Mismatch(_) => EXIT_MISMATCH,
                E::Internal(_) => 1,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_USAGE;
        }
    }
    1
}

pub fn require_file(path: &Path, code: u8, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(exit(code, format!("{what} not found: {}", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
