//! Command line driver: datagen -> preprocess -> train -> evaluate ->
//! explain, plus a grid search over the architecture/resampling axes.
//!
//! Exit codes: 0 success, 64 usage, 2 I/O or malformed data, 3 missing
//! prerequisite artifact, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xfdd_core::XfddError;

#[derive(Parser)]
#[command(
    name = "xfdd",
    version,
    about = "Fault detection and diagnosis over multichannel vehicle telemetry"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize labeled recordings as CSV files plus a dataset manifest.
    Datagen(DatagenArgs),
    /// Window recordings, split, standardize, and persist the tensors.
    Preprocess(PreprocessArgs),
    /// Train a model; writes checkpoint, history, curves, and metrics.
    Train(TrainArgs),
    /// Re-evaluate a trained checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Attribution reports: importance, interactions, timing.
    Explain(ExplainArgs),
    /// Trial search over architecture and resampling axes.
    Gridsearch(GridArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// JSON pipeline config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fault_type | fault_location
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Window count the smallest class should reach.
    #[arg(long)]
    per_class_windows: Option<usize>,
    /// Largest-to-smallest class size ratio (1.0 = balanced).
    #[arg(long)]
    imbalance_ratio: Option<f64>,
    /// Recording length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Sample rate in Hz.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    offset_sigmas: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `xfdd datagen`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    /// Train/val/test fractions, e.g. 0.7,0.15,0.15
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `xfdd preprocess`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// ftcm | flm | rnn | lstm | gru | desk | hybrid
    #[arg(long)]
    model: Option<String>,
    /// Feature-list JSON from `xfdd explain --select-top`.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eta_min: Option<f64>,
    /// none | undersample | smote | class_weights
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    smote_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hidden width for rnn/lstm/gru/hybrid models.
    #[arg(long)]
    hidden: Option<usize>,
    /// Recurrent depth for rnn/lstm/gru/hybrid models.
    #[arg(long)]
    rec_layers: Option<usize>,
    /// Conv block count for the hybrid model.
    #[arg(long)]
    conv: Option<usize>,
    /// Fully connected layer count for the hybrid model.
    #[arg(long)]
    fc: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `xfdd train`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Directory written by `xfdd preprocess`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `xfdd train`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Directory written by `xfdd preprocess`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (defaults to RUN/explain).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma list of ig | deeplift | gradshap | dlshap, or "all".
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma list of zero | mean | median | random, or "all".
    #[arg(long, value_delimiter = ',')]
    baselines: Option<Vec<String>>,
    /// Test windows to attribute.
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    ig_steps: Option<usize>,
    #[arg(long)]
    gs_samples: Option<usize>,
    #[arg(long)]
    gs_sigma: Option<f64>,
    /// Draw count for the random baseline.
    #[arg(long)]
    random_k: Option<usize>,
    /// Write a top-K feature list consumable by `xfdd train --features`.
    #[arg(long)]
    select_top: Option<usize>,
    /// Class whose logit drives the interaction screen.
    #[arg(long)]
    interaction_class: Option<usize>,
    /// Windows averaged by the interaction screen.
    #[arg(long)]
    interaction_windows: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `xfdd datagen`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trials to run; the whole space runs when the budget covers it.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// XFDD_DETERMINISTIC=1 forces one thread and zeroed timing fields so equal
/// configs reproduce byte-identical artifacts; XFDD_THREADS caps the pool.
fn init_runtime() -> bool {
    let deterministic =
        std::env::var("XFDD_DETERMINISTIC").map(|v| v == "1").unwrap_or(false);
    let threads = if deterministic {
        Some(1)
    } else {
        std::env::var("XFDD_THREADS").ok().and_then(|v| v.parse::<usize>().ok())
    };
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    deterministic
}

fn exit_for(err: &XfddError) -> u8 {
    match err {
        XfddError::InvalidArgument(_) | XfddError::ShapeMismatch { .. } => 64,
        XfddError::Io(_) | XfddError::Format(_) => 2,
        XfddError::MissingPrerequisite(_) => 3,
        XfddError::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(64) };
        }
    };
    let deterministic = init_runtime();
    let result = match cli.command {
        Command::Datagen(args) => commands::datagen(args),
        Command::Preprocess(args) => commands::preprocess(args),
        Command::Train(args) => commands::train(args, deterministic),
        Command::Evaluate(args) => commands::evaluate(args, deterministic),
        Command::Explain(args) => commands::explain(args, deterministic),
        Command::Gridsearch(args) => commands::gridsearch(args, deterministic),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xfdd: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
