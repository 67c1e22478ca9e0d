//! Command-line interface: `gnr train | augment | predict | eval`.
//!
//! Every subcommand takes `--config <file>` plus trailing `--key value`
//! overrides for any configuration key, e.g.
//! `gnr train --config run.cfg -- --seed 7 --beam_width 16`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gnr::commands::{cmd_augment, cmd_eval, cmd_eval_predictions, cmd_predict, cmd_train};
use gnr::config::{load, RunConfig};
use gnr::{GnrError, Result};

#[derive(Parser)]
#[command(name = "gnr", version, about = "Extractive question answering via staged beam search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and checkpoint the best dev epoch.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Sample entity-swapped variants of the training data.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Where to write the augmented examples (JSONL).
        #[arg(long)]
        output: PathBuf,
        /// How many examples to sample (defaults to augment_count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Answer every question in a dataset with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Dataset to answer (.json corpus or .jsonl examples).
        #[arg(long)]
        input: PathBuf,
        /// Trained checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the id -> {text, prob} map.
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint or a predictions file against gold answers.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset with gold answers (.json corpus or .jsonl examples).
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint to decode with.
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Predictions file from `gnr predict` to score instead.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Where to write the per-example report (JSONL).
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file of key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trailing configuration overrides: --key value pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        let mut words = self.overrides.iter();
        while let Some(word) = words.next() {
            let key = word.strip_prefix("--").ok_or_else(|| {
                GnrError::Usage(format!(
                    "override {word:?} should be a --key value pair"
                ))
            })?;
            let value = words.next().ok_or_else(|| {
                GnrError::Usage(format!("override --{key} is missing its value"))
            })?;
            pairs.push((key.to_string(), value.clone()));
        }
        Ok(load(self.config.as_deref(), &pairs)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            cmd_train(&common.config()?)?;
        }
        Command::Augment {
            common,
            output,
            count,
        } => {
            cmd_augment(&common.config()?, &output, count)?;
        }
        Command::Predict {
            common,
            input,
            checkpoint,
            output,
        } => {
            let n = cmd_predict(&common.config()?, &input, &checkpoint, &output)?;
            println!("wrote {n} predictions to {}", output.display());
        }
        Command::Eval {
            common,
            input,
            checkpoint,
            predictions,
            report,
        } => match (checkpoint, predictions) {
            (Some(checkpoint), None) => {
                cmd_eval(&common.config()?, &input, &checkpoint, report.as_deref())?;
            }
            (None, Some(predictions)) => {
                cmd_eval_predictions(&input, &predictions, report.as_deref())?;
            }
            _ => {
                return Err(GnrError::Usage(
                    "eval needs exactly one of --checkpoint or --predictions".to_string(),
                ))
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
