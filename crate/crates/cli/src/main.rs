//! `molpde`: generate PDE datasets, train neural PDE models and evaluate
//! rollouts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit code for bad flags, configs, missing files and similar.
pub const EXIT_USAGE: u8 = 2;
/// Exit code for NaN, stiffness and other numerical failures.
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "molpde", version, about = "Learn PDE dynamics from gridded data with the method of lines")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MOLPDE_THREADS")]
    threads: Option<usize>,

    /// JSON file with option values; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a PDE from random Gaussian-bell initial conditions and write
    /// train/val/test splits.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Roll a model out and report RMSE per prediction step.
    Evaluate(EvaluateArgs),
    /// Merge evaluation CSVs into one long-format table.
    ExportCurves(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// advection_diffusion, wave, burgers or gas_dynamics.
    #[arg(long)]
    pub system: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `full`: 100x100 -> 10x10 grid, t in [0, 501], 50/10/10 trajectories.
    /// `small`: 50x50 -> 10x10, t in [0, 64], 10/4/4.
    #[arg(long)]
    pub scale: Option<String>,
    /// Master seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one PDE parameter, e.g. `--param D=0.002`. Repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
    /// Override the derivative scale of the right-hand side.
    #[arg(long)]
    pub derivative_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// neuralpde1, neuralpde2 or cnn.
    #[arg(long)]
    pub model: Option<String>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 5 for neuralpde1/2, 20 for cnn]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 5000]
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Closed-loop training horizon [default: 4].
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// euler, rk4 or adaptive_rk [default: euler].
    #[arg(long)]
    pub solver: Option<String>,
    /// Fixed solver step; one output interval is 1 [default: 1].
    #[arg(long)]
    pub dt: Option<f64>,
    /// Adaptive solver tolerances [default: 1e-6].
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    /// Fixed batches used for validation and loss monitoring [default: 8].
    #[arg(long)]
    pub eval_batches: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Evaluate a built-in model instead of a checkpoint (`persistence`).
    #[arg(long)]
    pub model: Option<String>,
    /// Prediction steps [default: 16].
    #[arg(long)]
    pub horizon: Option<usize>,
    /// CSV report path; a JSON summary is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split to evaluate [default: test].
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Report CSVs written by `evaluate`.
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    /// Model labels in report order [default: from each report's summary, else the file stem].
    #[arg(long, num_args = 1..)]
    pub names: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match config::RunConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => return fail(commands::Failure::Usage(e)),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(commands::Failure::Usage(format!("cannot start {n} threads: {e}")));
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a, &file),
        Command::Train(a) => commands::train(a, &file),
        Command::Evaluate(a) => commands::evaluate(a, &file),
        Command::ExportCurves(a) => commands::export_curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: commands::Failure) -> ExitCode {
    eprintln!("error: {f}");
    ExitCode::from(match f {
        commands::Failure::Usage(_) => EXIT_USAGE,
        commands::Failure::Numerical(_) => EXIT_NUMERICAL,
    })
}
