//! `tcnn`: build indexes, train and evaluate matchers, and answer questions
//! against a knowledge base.

mod commands;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcnn_core::model::Variant;
use tcnn_core::text::TokenizerMode;

/// A usage or data problem reported by the front end itself (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A failed self-check (exit code 3).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser, Debug)]
#[command(name = "tcnn", version, about = "Retrieval-based question answering with convolutional matchers")]
pub struct Cli {
    /// File of key=value lines mirroring the long flags; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for candidate scoring (default: TCNN_THREADS, else 1).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print progress to standard error.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a BM25 index over a knowledge base.
    Index(IndexArgs),
    /// Train a matcher on labeled triples.
    Train(TrainArgs),
    /// Retrieve, rerank and score a labeled test set.
    Eval(EvalArgs),
    /// Answer one question.
    Query(QueryArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Time single-triple scoring.
    Bench(BenchArgs),
    /// Write a synthetic knowledge base and labeled dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub tokenizer: Option<TokenizerMode>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Checkpoint path; the vocabulary and history are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub use_answer: Option<bool>,
    #[arg(long)]
    pub tokenizer: Option<TokenizerMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight of positive examples, or "balanced".
    #[arg(long)]
    pub pos_weight: Option<PosWeight>,
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Whitespace-separated word vectors to start the embeddings from.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// "auto" sweeps the grid; a number applies that threshold.
    #[arg(long)]
    pub threshold: Option<Threshold>,
    /// Extra method to report next to the model.
    #[arg(long)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Word vectors for the baseline (defaults to the untrained table).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Also write the reports as JSON to this path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Defaults to the threshold selected during training.
    #[arg(long)]
    pub threshold: Option<f64>,
    pub question: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check one variant; all of them when omitted.
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Draw probe triples from this knowledge base instead of the vocabulary.
    #[arg(long)]
    pub kb: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub entries: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PosWeight {
    Balanced,
    Fixed(f64),
}

impl std::str::FromStr for PosWeight {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "balanced" {
            return Ok(PosWeight::Balanced);
        }
        match s.parse::<f64>() {
            Ok(w) if w.is_finite() && w > 0.0 => Ok(PosWeight::Fixed(w)),
            _ => Err(format!("expected a positive number or 'balanced', got '{s}'")),
        }
    }
}

impl fmt::Display for PosWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PosWeight::Balanced => f.write_str("balanced"),
            PosWeight::Fixed(w) => write!(f, "{w}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for Threshold {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Threshold::Auto);
        }
        match s.parse::<f64>() {
            Ok(t) if (0.0..=1.0).contains(&t) => Ok(Threshold::Fixed(t)),
            _ => Err(format!("expected 'auto' or a number in [0, 1], got '{s}'")),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Auto => f.write_str("auto"),
            Threshold::Fixed(t) => write!(f, "{t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    None,
    WordAverage,
}

impl std::str::FromStr for Baseline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Baseline::None),
            "word-average" => Ok(Baseline::WordAverage),
            _ => Err(format!("expected 'word-average' or 'none', got '{s}'")),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::None => "none",
            Baseline::WordAverage => "word-average",
        })
    }
}

/// 1 for I/O, 3 for numeric or check failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use tcnn_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => 1,
                E::Numeric(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<CheckFailed>() {
            return 3;
        }
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
