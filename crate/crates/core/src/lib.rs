//! Few-shot dysarthric speech classification toolkit.
//!
//! The crate covers the full experiment pipeline at configurable scale:
//!
//! * [`dsp`] — WAV ingestion, resampling, and 80-channel log-Mel features.
//! * [`corpus`] — corpus catalog, speaker-disjoint train/test splits, and a
//!   synthetic isolated-word corpus generator for desk-scale runs.
//! * [`model`] — a transformer audio encoder with a classification head,
//!   trainable from random initialization with hand-rolled backprop.
//! * [`lora`] — low-rank adaptation of the encoder's attention projections.
//! * [`train`] — deterministic supervised fine-tuning plus checkpoint I/O.
//! * [`eval`] — confusion matrices, the five classification metrics, and
//!   report rendering.
//! * [`pipeline`] — glue that chains the stages the way the CLI does.

pub mod corpus;
pub mod dsp;
pub mod eval;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod train;

mod io_util;

pub use corpus::{CorpusError, Manifest, SplitSpec};
pub use dsp::{AudioClip, DspError, FeatureConfig, MelSpectrogram};
pub use eval::{ConfusionMatrix, EvalError, MetricsReport};
pub use lora::{LoraConfig, LoraError};
pub use model::{EncoderConfig, EncoderModel, ModelError};
pub use train::{CheckpointError, TrainConfig, TrainError, TrainHistory};

/// Crate-wide error, aggregating the per-subsystem errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
