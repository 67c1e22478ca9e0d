//! Extractive question answering as staged beam search.
//!
//! A document/question pair is scored in three stages — sentence, answer
//! start, answer end — by bidirectional LSTM encoders. Scores are either
//! normalized per stage (a chain of softmaxes) or once over whole answer
//! spans, with the span partition function approximated by the beam during
//! training. The crate also ships type-aware data augmentation, corpus
//! ingestion, answer-string evaluation, and a small CLI over all of it.
//!
//! Module map:
//! - [`tensor`]: define-by-run autodiff, parameters, Adam, checkpoints
//! - [`encoders`]: word vectors, question/document encodings
//! - [`search`]: answer-span candidates, beam decoding, training losses
//! - [`dataio`]: tokenization, sentence splitting, corpus loading
//! - [`eval`]: answer-string metrics and report files
//! - [`typeswaps`]: entity-typed substitution for training-set augmentation
//! - [`config`] / [`commands`]: run configuration and the CLI verbs
//! - [`gradcheck`]: finite-difference gradient verification

pub mod commands;
pub mod config;
pub mod dataio;
pub mod encoders;
pub mod eval;
pub mod gradcheck;
pub mod search;
pub mod tensor;
pub mod typeswaps;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GnrError {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Encoder(#[from] encoders::EncoderError),
    #[error(transparent)]
    Search(#[from] search::SearchError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Swap(#[from] typeswaps::TypeSwapError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch} on example {example:?}")]
    NonFiniteLoss { epoch: usize, example: String },
}

impl GnrError {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            // Checkpoint read/write problems are data errors, not numerics.
            GnrError::Tensor(tensor::TensorError::Checkpoint(_)) => 2,
            GnrError::NonFiniteLoss { .. } | GnrError::Tensor(_) => 3,
            GnrError::Search(e) => match e {
                search::SearchError::Tensor(_) => 3,
                _ => 2,
            },
            GnrError::Eval(e) => match e {
                eval::EvalError::Search(search::SearchError::Tensor(_)) => 3,
                _ => 2,
            },
            GnrError::Config(e) => match e {
                config::ConfigError::Io { .. } => 2,
                _ => 1,
            },
            GnrError::Usage(_) => 1,
            GnrError::Encoder(_)
            | GnrError::Io { .. }
            | GnrError::Data(_)
            | GnrError::Swap(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, GnrError>;

pub(crate) fn io_error(path: &std::path::Path, source: std::io::Error) -> GnrError {
    GnrError::Io {
        path: path.display().to_string(),
        source,
    }
}
