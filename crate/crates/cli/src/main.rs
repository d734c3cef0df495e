//! `cdfnet`: generate synthetic data, train, evaluate, check gradients and
//! audit parameter counts.
//!
//! Exit codes: 0 success, 1 other failure (I/O, corrupt data), 2 usage,
//! 3 divergence, 4 checkpoint mismatch, 5 gradient check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cdfnet::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cdfnet",
    version,
    about = "Dense and competitive segmentation networks"
)]
struct Cli {
    /// Worker threads for convolution; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Evaluate checkpoints; several --run directories give a comparison table.
    Eval(EvalArgs),
    /// Finite-difference gradient check.
    Gradcheck(GradcheckArgs),
    /// Parameter counts of all variants side by side.
    Params(ParamsArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// easy, imbalanced or occluded.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// bl0, bl1, bl2 or cdfnet.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Epochs between learning-rate decays.
    #[arg(long)]
    pub lr_step: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// on or off.
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Also write loss.csv.
    #[arg(long)]
    pub dump_csv: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Training output directory; repeat to compare runs.
    #[arg(long)]
    pub run: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write dice.csv under --out.
    #[arg(long)]
    pub dump_csv: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// layer:<name>, block:<name>, net:<variant> or all.
    #[arg(long)]
    pub unit: String,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    #[arg(long, default_value_t = 5)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 1)]
    pub input_channels: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Label(_) | Error::Dimension(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::GradCheck(_) => 5,
        _ => 1,
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
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
        Command::Params(a) => commands::params_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
