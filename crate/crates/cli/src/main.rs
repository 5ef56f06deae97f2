//! `spdtp`: synthetic data, training, evaluation, weight export and ablation
//! sweeps.

mod ablate;
mod commands;
mod export;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Directory holding `train.jsonl` when `--data` is not given.
pub const DATA_DIR_ENV: &str = "SPDTP_DATA_DIR";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "spdtp",
    version,
    about = "Spatial parsing and dynamic temporal pooling for video HOI recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export spatial attention and temporal pooling weights.
    ExportWeights(ExportArgs),
    /// Train every configuration of a switch grid over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub videos: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Object count per video, `K` or `MIN-MAX`.
    #[arg(long, default_value = "2-3")]
    pub objects: String,
    /// Subactivity classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Affordance classes including the static class 0.
    #[arg(long, default_value_t = 3)]
    pub affordances: usize,
    #[arg(long, default_value_t = 5)]
    pub categories: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Multiplies every appearance descriptor.
    #[arg(long, default_value_t = 1.0)]
    pub feature_scale: f64,
    /// Frames carrying the signal; the rest repeat the first frame.
    #[arg(long)]
    pub keyframes: Option<usize>,
    /// Extra videos from the same generator, written to `--test-out`.
    #[arg(long, default_value_t = 0, requires = "test_out")]
    pub test_videos: usize,
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ModelConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override applied after the file, e.g. `--set pooling=AvgP`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelConfigArgs,
    /// Training set; defaults to `$SPDTP_DATA_DIR/train.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation set scored after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Run directory for `checkpoint.json`, `log.jsonl` and `config.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Same as `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub topk: Vec<usize>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Videos to export; every video when absent.
    #[arg(long = "video-id")]
    pub video_ids: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelConfigArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Switch lists, e.g. `pooling=DTP,AvgP;temporal_enhancement=on,off`.
    #[arg(long)]
    pub grid: String,
    /// Training seeds shared by every row, e.g. `0,1,2` or `0-4`.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    /// Output directory for `ablation.json` and `ablation.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub quiet: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportWeights(a) => export::run(a),
        Command::Ablate(a) => ablate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
