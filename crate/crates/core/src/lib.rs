//! Active-thermography sequence processing: containers, a synthetic plate
//! generator, PCA/TSR/PPT baselines, a masked convolution-attention
//! autoencoder and defect-visibility metrics.

pub mod autodiff;
pub mod baselines;
pub mod caae;
pub mod data;
pub mod metrics;
pub mod rng;
pub mod stack;
pub mod synth;

pub use data::{reshape_raster, unraster, PixelMatrix, ThermogramSequence};
pub use stack::ImageStack;
