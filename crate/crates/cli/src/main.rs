//! `nadir`: train, run, evaluate and benchmark transliteration models.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nadir::inference::Decoder;
use nadir::model::Variant;
use nadir::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "nadir", version, about = "Non-autoregressive character transliteration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a TSV corpus of source<TAB>target pairs.
    Train(TrainArgs),
    /// Transliterate one word per line.
    Infer(InferArgs),
    /// Score a checkpoint on a TSV corpus.
    Eval(EvalArgs),
    /// Break down errors of hypothesis files against references.
    Analyze(AnalyzeArgs),
    /// Measure throughput over batch sizes.
    Bench(BenchArgs),
    /// Generate a synthetic rule set and corpus splits.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags below take precedence.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    #[arg(long)]
    pub valid: Option<std::path::PathBuf>,
    /// Output directory for checkpoints, metrics and the resolved config.
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Model size preset: tiny, small or base.
    #[arg(long)]
    pub preset: Option<config::Preset>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub input: std::path::PathBuf,
    #[arg(long)]
    pub output: std::path::PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// nar, ar or ar-cached; defaults to ar-cached for models with a
    /// decoder and nar otherwise.
    #[arg(long)]
    pub decoder: Option<Decoder>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    #[arg(long)]
    pub report: std::path::PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub decoder: Option<Decoder>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// References, one per line; for TSV lines the last column is used.
    #[arg(long = "ref")]
    pub reference: std::path::PathBuf,
    /// Hypotheses, one per line, as written by `infer`.
    #[arg(long)]
    pub hyp: std::path::PathBuf,
    #[arg(long)]
    pub report: std::path::PathBuf,
    /// Further hypothesis files to compare against; gains are reported
    /// for `--hyp` over each of them.
    #[arg(long)]
    pub compare: Vec<std::path::PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    /// Words to transliterate, one per line; for TSV lines the first
    /// column is used.
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,8,64,256")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Prefix for `nar.csv`, `ar.csv`, `ar_cached.csv` and
    /// `monotonicity.json`; CSVs go to stdout when absent.
    #[arg(long)]
    pub out_prefix: Option<String>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Existing rule set JSON.
    #[arg(long, conflicts_with = "gen_rules")]
    pub rules: Option<std::path::PathBuf>,
    /// Generate rules from `seed,ambiguity`.
    #[arg(long)]
    pub gen_rules: Option<String>,
    #[arg(long, default_value_t = 26)]
    pub alphabet_size: usize,
    /// Total number of pairs across all splits.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to a tenth of `--n`.
    #[arg(long)]
    pub n_valid: Option<usize>,
    /// Defaults to a tenth of `--n`.
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long)]
    pub out_prefix: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::LengthExceeded { .. } | Error::Io { .. } | Error::Json(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Bench(a) => commands::bench(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
