//! `motionsynth`: synthetic motion corruption, labels, splits, metrics and
//! the motion probe from the command line.
//!
//! Data goes to stdout, logs to stderr (`RUST_LOG` sets verbosity). Exit
//! codes: 0 ok, 1 usage or configuration error, 2 data, audit or
//! generation failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn usage_from(e: motionsynth::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<motionsynth::Error> for Failure {
    fn from(e: motionsynth::Error) -> Self {
        match e {
            motionsynth::Error::Argument(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "motionsynth", version, about = "Synthetic MRI motion artifacts and motion-aware QC probes")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Config,
    /// Generate motion-corrupted volumes with sidecars and labels.
    Generate(GenerateArgs),
    /// Keep score-4 volumes whose QC comment mentions no motion keyword.
    Filter(FilterArgs),
    /// Assign site pools and/or subject-level splits, then audit.
    Split(SplitArgs),
    /// Check a manifest for subject and site leakage.
    Audit(AuditArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Extract probe features from a generation run.
    Features(FeaturesArgs),
    /// Build the toy fixture: phantom sources, generated volumes, features.
    Toy(ToyArgs),
    /// Train and compare motion probes.
    #[command(subcommand)]
    Probe(ProbeCommand),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    passes: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Case-insensitive comment keywords; repeatable. Defaults to motion,
    /// movement and ringing.
    #[arg(long = "keyword")]
    keywords: Vec<String>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sites reserved for synthetic generation (comma separated).
    #[arg(long, value_delimiter = ',')]
    synth_sites: Vec<String>,
    /// Sites reserved for QC classification (comma separated).
    #[arg(long, value_delimiter = ',')]
    qc_sites: Vec<String>,
    /// Train, val, test fractions over subjects.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// CSV of predictions; the `value` column, else the last one.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Regression only.
    #[arg(long)]
    calibration_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    calibration_points: usize,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    /// Output directory of a `generate` run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum ProbeCommand {
    /// Pretrain on motion scores (train/val rows of a feature table).
    Pretrain(PretrainArgs),
    /// Train a QC head on the frozen trunk of a pretrained checkpoint.
    Transfer(TransferArgs),
    /// Train a QC classifier from random weights.
    Scratch(ScratchArgs),
    /// Transfer vs scratch over several seeds, evaluated on the test rows.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct TransferArgs {
    /// Checkpoint stem (without `.bin` / `.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct ScratchArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Runs seeds 0..N for both arms.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comparison CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Config => commands::print_config(&cfg),
        Command::Generate(a) => commands::generate(cfg, a),
        Command::Filter(a) => commands::filter(a),
        Command::Split(a) => commands::split(a),
        Command::Audit(a) => commands::audit(a),
        Command::Eval(a) => commands::eval(a),
        Command::Features(a) => commands::features(a),
        Command::Toy(a) => commands::toy(cfg, a),
        Command::Probe(ProbeCommand::Pretrain(a)) => commands::pretrain(cfg, a),
        Command::Probe(ProbeCommand::Transfer(a)) => commands::transfer(cfg, a),
        Command::Probe(ProbeCommand::Scratch(a)) => commands::scratch(cfg, a),
        Command::Probe(ProbeCommand::Compare(a)) => commands::compare(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
