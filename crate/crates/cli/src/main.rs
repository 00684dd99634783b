mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use megdecode::eval::UpdatePolicy;
use megdecode::model::{Variant, DEFAULT_DROPOUT, DEFAULT_FILTER_LEN, DEFAULT_L1, DEFAULT_N_LATENT};

/// Spatiotemporal CNN decoding of MEG/EEG epochs.
///
/// Flags may also come from a `key = value` file given with `--config`;
/// flags on the command line take precedence.
#[derive(Debug, Parser)]
#[command(name = "megdecode", version, args_override_self = true)]
pub struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic epoch file.
    Synth(SynthArgs),
    /// Train a model on all subjects except the held-out one.
    Train(TrainArgs),
    /// Score a saved model on a subject, or run leave-one-subject-out evaluation.
    Eval(EvalArgs),
    /// Pseudo-real-time session: predict in batches, update after each batch.
    Rtsim(RtsimArgs),
    /// Activation patterns, latencies and filter spectra of an LF model.
    Interpret(InterpretArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Task {
    Evoked,
    Induced,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "evoked")]
    pub task: Task,
    #[arg(long, default_value_t = 64)]
    pub n_channels: usize,
    /// Post-stimulus samples per epoch at 125 Hz.
    #[arg(long, default_value_t = 125)]
    pub n_times: usize,
    /// Trials per class and subject (task default if omitted).
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub subjects: usize,
    /// Number of latent sources (task default if omitted).
    #[arg(long)]
    pub n_latent: Option<usize>,
    /// Channel-level evoked SNR (evoked task only).
    #[arg(long)]
    pub snr: Option<f64>,
    /// Sensor noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Per-subject mixing perturbation size.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Keep the pre-stimulus baseline and skip baseline scaling.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "lf")]
    pub variant: Variant,
    /// Latent components.
    #[arg(long, default_value_t = DEFAULT_N_LATENT)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_FILTER_LEN)]
    pub filter_len: usize,
    #[arg(long, default_value_t = DEFAULT_DROPOUT)]
    pub dropout: f64,
    #[arg(long, default_value_t = DEFAULT_L1)]
    pub l1: f64,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
    /// Iterations between validation checkpoints.
    #[arg(long, default_value_t = 1000)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub stop_delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint history CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Classifier {
    Cnn,
    Svm,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Saved model to score on `--held-out`.
    #[arg(long, conflicts_with = "loso", required_unless_present = "loso")]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
    /// Train and test one fresh model per held-out subject.
    #[arg(long)]
    pub loso: bool,
    #[arg(long, value_enum, default_value = "cnn")]
    pub classifier: Classifier,
    /// Also run a pseudo-real-time session on each held-out subject.
    #[arg(long)]
    pub realtime: bool,
    /// Learning rate of the pseudo-real-time updates.
    #[arg(long, default_value_t = 3e-4)]
    pub rt_lr: f64,
    #[arg(long, default_value = "all")]
    pub update_policy: UpdatePolicy,
    /// Per-fold CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model_cfg: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct RtsimArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// No-update baseline (learning rate 0).
    #[arg(long)]
    pub lr0: bool,
    #[arg(long, default_value = "all")]
    pub update_policy: UpdatePolicy,
    #[arg(long, default_value_t = megdecode::eval::REALTIME_BATCH)]
    pub batch_size: usize,
    /// Per-batch accuracy CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the adapted model here.
    #[arg(long)]
    pub save: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectionArg {
    Evoked,
    Induced,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct InterpretArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Estimate the data covariance from this subject only.
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long, value_enum, default_value = "evoked")]
    pub selection: SelectionArg,
    /// Multiply patterns by the inverse latent covariance.
    #[arg(long)]
    pub precision: bool,
    /// Directory for patterns.csv, spectra.csv and summary.txt.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs: exit 2.
    Usage(String),
    /// Failure while running: exit 3.
    Runtime(String),
}

impl From<megdecode::Error> for CliError {
    fn from(e: megdecode::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let argv = match config::expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.0);
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Rtsim(a) => commands::rtsim(&a),
        Command::Interpret(a) => commands::interpret(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
