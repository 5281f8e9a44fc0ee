//! `mmgru` — train, caption, evaluate and rank with a multimodal GRU model.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmgru_core::retrieval::{MedianMode, ScoreMode};
use mmgru_core::StackKind;

mod commands;
mod config;

use config::List;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mmgru_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmgru", version, about = "Multimodal GRU image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a run manifest.
    Train(TrainArgs),
    /// Greedy captions for every image in a feature file (JSON Lines).
    Caption(CaptionArgs),
    /// BLEU, METEOR and CIDEr of generated captions against references.
    Eval(EvalArgs),
    /// Bidirectional image/sentence retrieval: R@K and Med-r.
    Retrieve(RetrieveArgs),
    /// GRU and LSTM parameter counts per hidden size.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat key = value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Checkpoint path; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// 1 or 2.
    #[arg(long)]
    pub layers: Option<usize>,
    /// single, conventional or feedback (default: feedback for 2 layers).
    #[arg(long)]
    pub stack: Option<StackKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 weight penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Words seen fewer times become `<unk>`.
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub init_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Let the decoder emit `<unk>`.
    #[arg(long)]
    pub allow_unk: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Subset of bleu,meteor,cider.
    #[arg(long)]
    pub metrics: Option<List<String>>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub allow_unk: bool,
    /// Also write a run manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Recall cut-offs.
    #[arg(long)]
    pub k: Option<List<usize>>,
    /// both, i2s (sentence retrieval) or s2i (image retrieval).
    #[arg(long)]
    pub direction: Option<String>,
    /// mean-of-medians or conventional.
    #[arg(long)]
    pub medr_mode: Option<MedianMode>,
    /// normalized or raw log-likelihood.
    #[arg(long)]
    pub score: Option<ScoreMode>,
    /// Human-readable table instead of JSON.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hidden sizes.
    #[arg(long)]
    pub hidden: Option<List<usize>>,
    /// Input width of the first layer (default: the hidden size).
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub table: bool,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MMGRU_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("MMGRU_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Caption(a) => commands::caption(a),
        Command::Eval(a) => commands::eval(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Params(a) => commands::params(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmgru: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
