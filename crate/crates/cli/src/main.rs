//! `flexitok` command-line driver.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flexitok::calibration::{DEFAULT_BETA_FLOOR, DEFAULT_LAMBDA};
use flexitok::objectives::BoundaryLossKind;

#[derive(Debug, Parser)]
#[command(
    name = "flexitok",
    version,
    about = "Byte-level LM with a learnable tokenizer"
)]
struct Cli {
    /// Worker threads (overrides FLEXITOK_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Derive per-language rate bands from a parallel corpus.
    Calibrate(CalibrateArgs),
    /// Pretrain a model from a run config.
    Pretrain(PretrainArgs),
    /// Attach a task head to a checkpoint and finetune it.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on text, parallel and labeled data.
    Eval(EvalArgs),
    /// Show the learned segmentation of a text.
    Tokenize(TokenizeArgs),
    /// Train a byte-level BPE comparator.
    BpeTrain(BpeTrainArgs),
    /// Generate deterministic synthetic corpora.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Tab-separated parallel corpus with a header row of language codes.
    #[arg(long)]
    pub parallel: PathBuf,
    #[arg(long, default_value = "en")]
    pub anchor: String,
    /// Boundary rate of the anchor language.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_BETA_FLOOR)]
    pub beta_floor: f64,
    /// Write the rate table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print JSON instead of a text table.
    #[arg(long)]
    pub json: bool,
}

/// Overrides shared by the training commands.
#[derive(Debug, Args)]
pub struct RunOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<BoundaryLossKind>,
    /// Recompute every lower bound with this multiplier.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Re-anchor the calibration report at this anchor rate.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; must be new or empty.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: RunOverrides,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Classification,
    Tagging,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the head kind in the config.
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[command(flatten)]
    pub overrides: RunOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL documents for bits per byte and compression.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Parallel corpus for tokens per sample.
    #[arg(long)]
    pub parallel: Option<PathBuf>,
    /// JSONL labeled records for the task metric.
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    /// Rate table to check compression against (defaults to the checkpoint's).
    #[arg(long)]
    pub rates: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    pub text: Option<String>,
    #[arg(long)]
    pub file: Option<PathBuf>,
    /// BPE model to show alongside.
    #[arg(long)]
    pub compare_bpe: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BpeTrainArgs {
    /// JSONL documents.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Only train on documents in this language.
    #[arg(long)]
    pub lang: Option<String>,
    #[arg(long)]
    pub vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Documents,
    Parallel,
    Classification,
    Tagging,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: SynthKind,
    /// Comma-separated `code:script` pairs (scripts: latin, telugu).
    #[arg(long, default_value = "en:latin,te:telugu")]
    pub langs: String,
    /// Documents per language, sentences, or records.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub sentences_per_doc: usize,
    /// Sentence stream for documents (same lexicon, fresh sentences).
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Lexicon seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Two long morphemes per word.
    #[arg(long)]
    pub long_words: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_loss(s: &str) -> Result<BoundaryLossKind, String> {
    s.parse().map_err(|e: flexitok::Error| e.to_string())
}

fn configure_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FLEXITOK_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| {
                exit::config_error(format!("FLEXITOK_THREADS=`{v}` is not a count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(exit::config_error)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Tokenize(a) => commands::tokenize(a),
        Command::BpeTrain(a) => commands::bpe_train(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_of(&e))
        }
    }
}
