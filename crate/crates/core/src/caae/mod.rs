//! Masked convolution-attention autoencoder for per-pixel thermal responses.

mod checkpoint;
mod config;
mod corrupt;
mod encode;
mod model;
mod train;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_hash, read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to,
    CHECKPOINT_MAGIC,
};
pub use config::{CaaeConfig, Corruption};
pub use corrupt::{corrupt, CorruptedBatch, MaskSpec};
pub use encode::{encode_pixels, encode_sequence, reconstruct_sequence, sequence_hash, LatentImageStack};
pub use model::{build_forward, param_layout, ForwardVars, ModelState, ParamSpec, DECODER_HIDDEN_CONVS};
pub use train::{
    batch_gradients, loss, pca_targets, train, train_with_progress, BatchStats, EpochLoss, LossTerms, PcaTargets,
    StepLoss, TrainHistory, TrainOutput,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::baselines::BaselineError;
use crate::data::DataError;

#[derive(Debug, Error)]
pub enum CaaeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss (rec {rec}, kd {kd})")]
    NonFiniteLoss { rec: f64, kd: f64 },
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        /// Parameters before the failing update.
        last_good: Box<ModelState>,
        history: Box<TrainHistory>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CaaeError>;
