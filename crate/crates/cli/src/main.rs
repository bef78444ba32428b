//! `motionrnn`: data generation, training, evaluation, prediction, trend
//! export and ablation runs for MotionRNN.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{CommonArgs, DataArgs, GenArgs, ModelArgs, SeqArgs, TrainArgs, DEFAULT_METRICS};

#[derive(Parser, Debug)]
#[command(name = "motionrnn", version, about = "MotionRNN video prediction on synthetic moving digits")]
#[command(after_help = "Environment: MOTIONRNN_THREADS caps the worker pool size.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate moving-digit sequences into a VSEQ file.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainCmd),
    /// Evaluate a checkpoint and write a metric report CSV.
    Eval(EvalCmd),
    /// Predict one sequence and write PGM frames.
    Predict(PredictCmd),
    /// Export the trending-momentum field of one MotionGRU as CSV and SVG.
    ExportTrend(TrendCmd),
    /// Train and evaluate every MH/TV/TM combination.
    Ablate(AblateCmd),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of sequences.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Split name; part of every sequence seed.
    #[arg(long, default_value = "train")]
    split: String,
    #[command(flatten)]
    seq: SeqArgs,
    #[command(flatten)]
    gen: GenArgs,
    /// Output VSEQ path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    seq: SeqArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the loss log (and the checkpoint by default).
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Checkpoint path [default: <out>/model.mrnn].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    seq: SeqArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma separated metrics: mse, mae, ssim, psnr, gdl, csi@<threshold>.
    #[arg(long, default_value = DEFAULT_METRICS)]
    metrics: String,
    /// Report MSE/MAE as per-frame pixel sums instead of per-pixel means.
    #[arg(long)]
    paper_units: bool,
    /// Output CSV path.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    seq: SeqArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence index within the data.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output directory for PGM frames.
    #[arg(long, default_value = "predict")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrendCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    seq: SeqArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence index within the data.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Frames consumed before reading the field (0: initial state).
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Layer interface of the MotionGRU (0-based).
    #[arg(long, default_value_t = 0)]
    interface: usize,
    /// Output CSV path; the SVG is written next to it.
    #[arg(long, default_value = "trend.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    seq: SeqArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Comma separated metrics reported per run.
    #[arg(long, default_value = "mse,mae,ssim")]
    metrics: String,
    /// Comparison CSV path.
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let result = commands::init_threads().and_then(|()| match &cli.command {
        Command::GenData(a) => commands::gen_data(a, sub),
        Command::Train(a) => commands::train(a, sub),
        Command::Eval(a) => commands::eval(a, sub),
        Command::Predict(a) => commands::predict(a, sub),
        Command::ExportTrend(a) => commands::export_trend(a, sub),
        Command::Ablate(a) => commands::ablate(a, sub),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
