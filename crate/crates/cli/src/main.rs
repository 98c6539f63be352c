//! `gesturenet`: generate data, train, evaluate, predict, check gradients.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gesturenet::gradsuite::SuiteOptions;
use gesturenet::Error;

use config::{read_config_file, resolve, EvalRun, GenConfig, TrainRun};

#[derive(Parser, Debug)]
#[command(name = "gesturenet", version, about = "Frame-wise gesture recognition networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic motion-gesture dataset.
    Gendata(GendataArgs),
    /// Train a model; writes checkpoint, history and manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Write per-frame class probabilities as CSV.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// List the builtin architectures.
    Archs,
}

#[derive(Args, Debug)]
struct GendataArgs {
    /// key=value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<String>,
    /// Gesture classes (silence comes on top).
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    sequences: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    noise: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin name (see `archs`) or an inline architecture string.
    #[arg(long)]
    arch: Option<String>,
    /// Model family of an inline architecture: single, tpool, tconv, rnn, lstm, tconv_lstm.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    val: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    steps_per_epoch: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    fragment_len: Option<String>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// true or false.
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    val_samples: Option<String>,
    /// Frame-by-frame epochs before temporal pooling (pooling models).
    #[arg(long)]
    pretrain_epochs: Option<String>,
    /// Bias and activation on the spatial half of factorized blocks.
    #[arg(long)]
    activate_spatial: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Score the prediction tracks in this directory instead of a checkpoint.
    #[arg(long)]
    tracks: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Fail unless the checkpoint holds this architecture.
    #[arg(long)]
    arch: Option<String>,
    /// skip or include (class, sequence) pairs absent from both tracks.
    #[arg(long)]
    absent_pairs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Output CSV file.
    #[arg(long)]
    out: Option<String>,
    /// Also write binary prediction tracks to this directory.
    #[arg(long)]
    tracks: Option<String>,
    /// Only this sequence index.
    #[arg(long)]
    sequence: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gesturenet::autodiff::gradcheck::DEFAULT_STEP)]
    step: f64,
    /// Components sampled per tensor for the whole-network row.
    #[arg(long, default_value_t = 24)]
    components: usize,
    /// Corrupt the backward pass (negative control).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Parse { .. } | Error::Build(_) | Error::Shape { .. } => 1,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn run(cli: Cli) -> gesturenet::Result<bool> {
    match cli.command {
        Command::Gendata(a) => {
            let mut cfg = GenConfig::default();
            let flags = vec![
                ("out", a.out),
                ("classes", a.classes),
                ("sequences", a.sequences),
                ("frames", a.frames),
                ("size", a.size),
                ("channels", a.channels),
                ("seed", a.seed),
                ("noise", a.noise),
            ];
            resolve(&mut cfg, read_config_file(a.config.as_deref())?, flags, GenConfig::set)?;
            commands::gendata(&cfg)?;
        }
        Command::Train(a) => {
            let mut run = TrainRun::default();
            let flags = vec![
                ("arch", a.arch),
                ("variant", a.variant),
                ("data", a.data),
                ("val", a.val),
                ("out", a.out),
                ("seed", a.seed),
                ("batch_size", a.batch_size),
                ("learning_rate", a.learning_rate),
                ("gamma", a.gamma),
                ("patience", a.patience),
                ("max_epochs", a.max_epochs),
                ("steps_per_epoch", a.steps_per_epoch),
                ("max_steps", a.max_steps),
                ("fragment_len", a.fragment_len),
                ("precision", a.precision),
                ("augment", a.augment),
                ("val_samples", a.val_samples),
                ("pretrain_epochs", a.pretrain_epochs),
                ("activate_spatial", a.activate_spatial),
            ];
            resolve(&mut run, read_config_file(a.config.as_deref())?, flags, TrainRun::set)?;
            commands::train(&run)?;
        }
        Command::Eval(a) => {
            let mut run = EvalRun::default();
            let flags = vec![
                ("checkpoint", a.checkpoint),
                ("tracks", a.tracks),
                ("data", a.data),
                ("out", a.out),
                ("arch", a.arch),
                ("absent_pairs", a.absent_pairs),
                ("batch_size", a.batch_size),
            ];
            resolve(&mut run, read_config_file(a.config.as_deref())?, flags, EvalRun::set)?;
            commands::eval(&run)?;
        }
        Command::Predict(a) => {
            let mut run = EvalRun::default();
            let flags = vec![
                ("checkpoint", a.checkpoint),
                ("data", a.data),
                ("out", a.out),
                ("sequence", a.sequence),
                ("tracks", a.tracks),
                ("arch", a.arch),
                ("batch_size", a.batch_size),
            ];
            resolve(&mut run, read_config_file(a.config.as_deref())?, flags, EvalRun::set)?;
            commands::predict(&run)?;
        }
        Command::Gradcheck(a) => {
            let opts = SuiteOptions {
                seed: a.seed,
                step: a.step,
                inject_fault: a.inject_fault,
                network_components: a.components,
            };
            return commands::gradcheck(&opts);
        }
        Command::Archs => commands::archs(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
