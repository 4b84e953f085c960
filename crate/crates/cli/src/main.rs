//! `crrn`: train, run and verify contextual recurrent residual networks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "crrn", about = "Scene labeling with contextual recurrent residual networks")]
struct Cli {
    /// Worker threads for the per-image sweeps. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a model on a manifest of labeled images.
    Train(TrainArgs),
    /// Label one image with a trained checkpoint.
    Infer(InferArgs),
    /// Compute pixel and class accuracy over a labeled manifest.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset whose labels need long-range context.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ConnectivityArg {
    Eight,
    Four,
}

impl From<ConnectivityArg> for crrn::Connectivity {
    fn from(c: ConnectivityArg) -> Self {
        match c {
            ConnectivityArg::Eight => crrn::Connectivity::Eight,
            ConnectivityArg::Four => crrn::Connectivity::Four,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LabelFormat {
    Png,
    Pgm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ImageFormat {
    Png,
    Ppm,
}

/// Unset flags keep the value from `--resume`, or else the built-in default.
#[derive(Args, Debug)]
struct TrainArgs {
    /// Tab-separated `image<TAB>labels` lines.
    #[arg(long)]
    manifest: PathBuf,
    /// Separate validation manifest; without it `--val-fraction` is held out.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Directory for last.ckpt, best.ckpt and log.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Initial learning rate [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Learning-rate multiplier per decay step [default: 0.95]
    #[arg(long)]
    decay_rate: Option<f64>,
    /// Epochs between decay steps [default: 30]
    #[arg(long)]
    decay_every_epochs: Option<usize>,
    /// Decay only once, after the first `--decay-every-epochs` epochs.
    #[arg(long)]
    decay_once: bool,
    /// Total epochs, counting those of a resumed run [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per SGD step [default: 1]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialization, shuffling and the validation split [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    grad_clip_norm: Option<f64>,
    /// Block grid rows [default: 8]
    #[arg(long)]
    grid_rows: Option<usize>,
    /// Block grid columns [default: 8]
    #[arg(long)]
    grid_cols: Option<usize>,
    /// Hidden state size; must be a perfect square [default: 256]
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Channels between the two residual convolutions [default: 4]
    #[arg(long)]
    residual_mid_channels: Option<usize>,
    /// Number of classes [default: 2]
    #[arg(long)]
    num_classes: Option<usize>,
    /// Share of training images held out for validation [default: 0.1]
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Randomly mirror training images left to right.
    #[arg(long)]
    flip: bool,
    /// Block neighborhood [default: eight]
    #[arg(long, value_enum)]
    connectivity: Option<ConnectivityArg>,
    /// Separate parameters for each sweep direction.
    #[arg(long)]
    per_direction_params: bool,
    /// Feed the post-residual state, not the intermediate one, to the output.
    #[arg(long)]
    fuse_post_residual: bool,
    /// Keep the recurrent weights at zero (no context between blocks).
    #[arg(long)]
    ablate_context: bool,
    /// Train with frozen batch-norm statistics from this epoch on.
    #[arg(long)]
    freeze_bn_after: Option<usize>,
    /// Record wall-clock seconds per epoch; `false` makes logs reproducible [default: true]
    #[arg(long)]
    log_timing: Option<bool>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM or PNG image with the extents the model was trained on.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON array of `[r, g, b]` colors, one per class; adds a color image.
    #[arg(long)]
    colors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "png")]
    format: LabelFormat,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Required unless `--oracle` is given.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for eval.json.
    #[arg(long)]
    out: PathBuf,
    /// Use the ground truth as the prediction.
    #[arg(long)]
    oracle: bool,
    /// Class count when no checkpoint is given [default: largest label + 1]
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    grid_rows: usize,
    #[arg(long, default_value_t = 2)]
    grid_cols: usize,
    #[arg(long, default_value_t = 16)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    residual_mid_channels: usize,
    #[arg(long, default_value_t = 3)]
    num_classes: usize,
    #[arg(long, default_value_t = 8)]
    image_height: usize,
    #[arg(long, default_value_t = 8)]
    image_width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, value_enum, default_value = "eight")]
    connectivity: ConnectivityArg,
    #[arg(long)]
    per_direction_params: bool,
    #[arg(long)]
    fuse_post_residual: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Also write gradcheck.jsonl here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of images.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON generator settings; overrides `--size` and `--num-classes`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    #[arg(long, value_enum, default_value = "png")]
    format: ImageFormat,
}

/// Failure categories, mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<crrn::Error> for Failure {
    fn from(e: crrn::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let version = format!(
        "{} (checkpoint format {})",
        env!("CARGO_PKG_VERSION"),
        crrn::FORMAT_VERSION
    );
    let matches = match Cli::command().version(version).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
