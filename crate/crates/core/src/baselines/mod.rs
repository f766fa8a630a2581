//! Classical dimensionality-reduction references: PCA, TSR and PPT.

mod pca;
mod ppt;
mod tsr;

pub use pca::{pca, pca_rows, PcaResult};
pub use ppt::{dft_bin, ppt, ppt_with, PptResult, Transform};
pub use tsr::{tsr, TsrResult, DEFAULT_TSR_DEGREE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("k = {k} outside 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("polynomial degree {degree} needs 1 <= degree < n_t = {n_t}")]
    InvalidDegree { degree: usize, n_t: usize },
    #[error("PCA expects a centered matrix")]
    NotCentered,
    #[error("TSR expects raw, uncentered responses")]
    Centered,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, BaselineError>;
