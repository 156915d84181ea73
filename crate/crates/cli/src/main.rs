//! Command-line driver wiring the toolkit into reproducible pipelines:
//! `extract`, `train`, `predict`, `fuse`, `saliency`, `evaluate`.
//!
//! Exit codes: 0 success, 1 data error, 2 config error, 3 numeric
//! failure (non-finite loss).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use paralearn::config::ConfigError;
use paralearn::ensemble::EnsembleError;
use paralearn::net::NetError;

#[derive(Parser)]
#[command(
    name = "paralearn",
    version,
    about = "End-to-end audio classification and regression with bagged conv-LSTM ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract PLFB feature files from a directory of WAV files.
    Extract {
        /// Directory containing .wav files.
        audio_dir: PathBuf,
        /// Output directory for .plfb files.
        #[arg(long)]
        out: PathBuf,
        /// Config file (`key = value` lines, `#` comments).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override single config keys, e.g. --set dsp.n_mels=200.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Preemphasis + Butterworth low-pass, then keep only the
        /// dsp.low_freq_k lowest bands.
        #[arg(long)]
        low_freq: bool,
        /// Worker threads for per-file parallelism.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train an ensemble on extracted features.
    Train {
        /// Directory of .plfb feature files.
        #[arg(long)]
        features: PathBuf,
        /// Label CSV.
        #[arg(long)]
        labels: PathBuf,
        /// Output directory: checkpoints, resolved config, training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads for ensemble-member parallelism.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Average ensemble predictions over feature files.
    Predict {
        /// Directory of .plmp checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Output prediction CSV (per-task suffixes for multi-task).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Additionally write each member's own predictions.
        #[arg(long)]
        per_model: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Soft-vote prediction CSVs into a fused CSV.
    Fuse {
        /// Prediction CSVs to combine.
        inputs: Vec<PathBuf>,
        /// Comma-separated weights, one per input (default: equal).
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Input-gradient band importance per ensemble member.
    Saliency {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Output directory for per-model CSVs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write per-file gradient-magnitude maps as PLFB.
        #[arg(long)]
        per_file: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score a prediction CSV against a label CSV.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also write the metrics as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Task to score (default: the first configured task).
        #[arg(long)]
        task: Option<String>,
    },
}

fn exit_code_for(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return ExitCode::from(2);
        }
        if let Some(net) = cause.downcast_ref::<NetError>() {
            if matches!(net, NetError::NonFiniteLoss { .. }) {
                return ExitCode::from(3);
            }
        }
        if let Some(EnsembleError::Train { source, .. }) = cause.downcast_ref::<EnsembleError>() {
            if matches!(source, NetError::NonFiniteLoss { .. }) {
                return ExitCode::from(3);
            }
        }
    }
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract {
            audio_dir,
            out,
            config,
            overrides,
            low_freq,
            workers,
        } => commands::extract(
            &audio_dir,
            &out,
            config.as_deref(),
            &overrides,
            low_freq,
            workers,
        ),
        Command::Train {
            features,
            labels,
            out,
            config,
            overrides,
            workers,
        } => commands::train(
            &features,
            &labels,
            &out,
            config.as_deref(),
            &overrides,
            workers,
        ),
        Command::Predict {
            checkpoints,
            features,
            out,
            config,
            overrides,
            per_model,
            workers,
        } => commands::predict(
            &checkpoints,
            &features,
            &out,
            config.as_deref(),
            &overrides,
            per_model,
            workers,
        ),
        Command::Fuse {
            inputs,
            weights,
            out,
        } => commands::fuse(&inputs, weights.as_deref(), &out),
        Command::Saliency {
            checkpoints,
            features,
            out,
            config,
            overrides,
            per_file,
            workers,
        } => commands::saliency(
            &checkpoints,
            &features,
            &out,
            config.as_deref(),
            &overrides,
            per_file,
            workers,
        ),
        Command::Evaluate {
            predictions,
            labels,
            out,
            config,
            overrides,
            task,
        } => commands::evaluate(
            &predictions,
            &labels,
            out.as_deref(),
            config.as_deref(),
            &overrides,
            task.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}
