mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use bshare_core::container::MatrixType;
use bshare_core::planner::SequentialMode;
use bshare_core::ErrorClass;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bshare",
    version,
    about = "Shared-basis SVD compression for GPT-2-style transformers"
)]
struct Cli {
    /// Worker threads for parallel stages (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Raise log verbosity (-v info, -vv debug). `RUST_LOG` overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random GPT-2-like model (and optionally a token stream).
    GenSynthetic(GenSyntheticArgs),
    /// Accumulate per-site Gram matrices from a token stream.
    Calibrate(CalibrateArgs),
    /// Pairwise sharing losses per matrix type, as CSV heatmaps and JSON verdicts.
    Analyze(AnalyzeArgs),
    /// Print the compression plan for a model without factorizing anything.
    Plan(PlanArgs),
    /// Compress a dense model into shared bases and per-layer coefficients.
    Compress(CompressArgs),
    /// Perplexity over non-overlapping (or strided) windows of a token stream.
    Eval(EvalArgs),
    /// Time batched forward passes and count FLOPs.
    Bench(BenchArgs),
    /// Describe a container: manifest, parameter counts and compression summary.
    Info(InfoArgs),
}

#[derive(Args)]
pub struct GenSyntheticArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// MLP width (0 = 4 × hidden).
    #[arg(long, default_value_t = 0)]
    pub mlp: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub context: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a synthetic token stream here.
    #[arg(long)]
    pub out_tokens: Option<PathBuf>,
    #[arg(long, default_value_t = 16384)]
    pub token_count: usize,
}

/// Where calibration statistics come from.
#[derive(Args)]
pub struct CalibrationArgs {
    /// Calibration token stream (`.tok`).
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 2048)]
    pub seqlen: usize,
    /// Seed for the synthetic calibration stream used when a synthetic model has no `--tokens`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub calib: CalibrationArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub calib: CalibrationArgs,
    /// Precomputed Gram container from `calibrate`.
    #[arg(long, conflicts_with = "tokens")]
    pub grams: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub ratio: f64,
    /// Output directory for heatmaps and verdicts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TypeList(pub Vec<MatrixType>);

fn parse_types(s: &str) -> Result<TypeList, String> {
    MatrixType::parse_list(s).map(TypeList)
}

#[derive(Args)]
pub struct PlanOptions {
    /// Removed fraction of the compressed scope, in [0, 1).
    #[arg(long)]
    pub ratio: f64,
    #[arg(long, default_value_t = 2)]
    pub group_size: usize,
    /// Types that share a basis; other types present in the model are compressed per layer.
    #[arg(long, default_value = "K,Q,V,Up,Gate", value_parser = parse_types)]
    pub types: TypeList,
    #[arg(long, default_value = "auto")]
    pub sequential_update: SequentialMode,
}

#[derive(Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub plan: PlanOptions,
    /// Write the plan as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub plan: PlanOptions,
    #[command(flatten)]
    pub calib: CalibrationArgs,
    #[arg(long, conflicts_with = "tokens")]
    pub grams: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path prefix; defaults to the output path. Writes `.report.txt` and `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long, default_value_t = 2048)]
    pub seqlen: usize,
    /// Window advance (defaults to `--seqlen`).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 128)]
    pub seq: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Also show what this removed fraction means under both ratio conventions.
    #[arg(long)]
    pub ratio: Option<f64>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }

    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Plan(a) => commands::plan(a),
        Command::Compress(a) => commands::compress(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Info(a) => commands::info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
