//! `blurspace` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "blurspace",
    version,
    about = "Learned blur-kernel spaces: train, deblur, transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural sharp/blurry dataset with known motion kernels.
    Synth(SynthArgs),
    /// Train the operator family and kernel extractor.
    Train(TrainArgs),
    /// Blind-deblur one image with a trained operator family.
    Deblur(DeblurArgs),
    /// Recover the latent kernel of a known sharp/blurry pair.
    Retrieve(RetrieveArgs),
    /// Transfer the blur of one pair onto new sharp images.
    Transfer(TransferArgs),
    /// Rebuild a dataset with every pair's blur taken from another pair.
    Swap(SwapArgs),
    /// Report reconstruction and transfer PSNR on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    kernels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the square motion kernels (odd).
    #[arg(long, default_value_t = 9)]
    kernel_size: usize,
    /// Points on each random motion trajectory.
    #[arg(long, default_value_t = 64)]
    trajectory_steps: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `optimizer.total_iters`.
    #[arg(long)]
    iters: Option<u64>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

/// Iteration budgets shared by `deblur` and `retrieve`.
#[derive(Debug, Args)]
struct BudgetArgs {
    /// JSON run configuration whose `deblur` section replaces the one stored
    /// with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    outer_iters: Option<usize>,
    #[arg(long)]
    inner_iters_first: Option<usize>,
    #[arg(long)]
    inner_iters_rest: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DeblurArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Write the per-step objective trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sharp: PathBuf,
    #[arg(long)]
    blurry: PathBuf,
    /// Save `F(sharp, k)` as PNG.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Save the latent kernel as JSON.
    #[arg(long)]
    kernel_out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sharp: PathBuf,
    #[arg(long)]
    blurry: PathBuf,
    /// Output directory; each result is named after its target.
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    targets: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SwapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<blurspace::Error> for Failure {
    fn from(e: blurspace::Error) -> Self {
        use blurspace::Error;
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<blurspace::Aborted> for Failure {
    fn from(a: blurspace::Aborted) -> Self {
        Failure::Runtime(a.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

fn threads() -> Result<usize, Failure> {
    match std::env::var("BKS_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!(
                "BKS_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = threads().and_then(|threads| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Deblur(a) => commands::deblur(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Transfer(a) => commands::transfer(a, threads),
        Command::Swap(a) => commands::swap(a),
        Command::Eval(a) => commands::eval(a, threads),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
