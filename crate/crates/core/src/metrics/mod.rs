//! Defect-visibility metrics: contrast, SNR and IoU over labelled regions.
//!
//! Contrast is `|μ_d − μ_s| / (μ_d + μ_s)` and SNR is `|μ_d − μ_s| / σ_s`,
//! where `d` is a defect class and `s` the sound region. Stack-level scoring
//! min-max normalizes each image to `[0, 1]` first, since latent and score
//! images are signed.

mod denoise;
mod report;

pub use denoise::{denoise_then_pca_eval, BoxError, IdentityReconstructor, PcCurveRow, SequenceReconstructor};
pub use report::{best_of_stack, ClassEntry, IouEntry, MetricsReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reported in place of `20·log10(0)`.
pub const SNR_DB_SENTINEL: f64 = -999.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("region is empty: {0}")]
    EmptyRegion(&'static str),
    #[error("contrast undefined: defect and sound means sum to zero")]
    ZeroMeanSum,
    #[error("sound region has zero standard deviation")]
    DegenerateSound,
    #[error("unknown class {0}")]
    UnknownClass(u8),
    #[error("no image in the stack could be scored for class {0}")]
    NoScorableImage(String),
    #[error("{0}")]
    Upstream(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Per-pixel labels: 0 is sound, `c > 0` is defect class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    n_y: usize,
    n_x: usize,
    labels: Vec<u8>,
    /// Depth in mm of class `c` at index `c - 1`, when known.
    depths: Vec<Option<f64>>,
}

impl RegionMask {
    pub fn new(n_y: usize, n_x: usize, labels: Vec<u8>, depths: Vec<Option<f64>>) -> Result<Self> {
        if labels.len() != n_y * n_x {
            return Err(MetricsError::DimensionMismatch(format!(
                "{} labels for a {n_y}x{n_x} frame",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > depths.len()) {
            return Err(MetricsError::UnknownClass(bad));
        }
        Ok(Self {
            n_y,
            n_x,
            labels,
            depths,
        })
    }

    pub fn with_depths(n_y: usize, n_x: usize, labels: Vec<u8>, depths: Vec<f64>) -> Result<Self> {
        Self::new(n_y, n_x, labels, depths.into_iter().map(Some).collect())
    }

    /// Single defect class with unknown depth, e.g. from a PGM file.
    pub fn binary(n_y: usize, n_x: usize, defect: &[bool]) -> Result<Self> {
        let labels = defect.iter().map(|&d| u8::from(d)).collect();
        Self::new(n_y, n_x, labels, vec![None])
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.n_x + x]
    }

    pub fn depths(&self) -> &[Option<f64>] {
        &self.depths
    }

    pub fn n_classes(&self) -> usize {
        self.depths.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u8> {
        1..=self.depths.len() as u8
    }

    pub fn is_defect(&self, p: usize) -> bool {
        self.labels[p] != 0
    }

    pub fn defect_flags(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn count(&self, class: Option<u8>) -> usize {
        self.labels.iter().filter(|&&l| selects(class, l)).count()
    }

    pub fn sound_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 0).count()
    }
}

fn selects(class: Option<u8>, label: u8) -> bool {
    match class {
        Some(c) => label == c,
        None => label != 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RegionStats {
    mean_defect: f64,
    mean_sound: f64,
    std_sound: f64,
}

/// `class = None` pools every defect class.
fn region_stats(img: &[f64], mask: &RegionMask, class: Option<u8>) -> Result<RegionStats> {
    if img.len() != mask.labels.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "image has {} pixels, mask {}",
            img.len(),
            mask.labels.len()
        )));
    }
    if let Some(c) = class {
        if c == 0 || c as usize > mask.n_classes() {
            return Err(MetricsError::UnknownClass(c));
        }
    }
    let (mut sd, mut nd, mut ss, mut ns) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &l) in img.iter().zip(&mask.labels) {
        if l == 0 {
            ss += v;
            ns += 1;
        } else if selects(class, l) {
            sd += v;
            nd += 1;
        }
    }
    if nd == 0 {
        return Err(MetricsError::EmptyRegion("defect"));
    }
    if ns == 0 {
        return Err(MetricsError::EmptyRegion("sound"));
    }
    let mean_sound = ss / ns as f64;
    let var = img
        .iter()
        .zip(&mask.labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&v, _)| (v - mean_sound).powi(2))
        .sum::<f64>()
        / ns as f64;
    Ok(RegionStats {
        mean_defect: sd / nd as f64,
        mean_sound,
        std_sound: var.sqrt(),
    })
}

/// `|μ_d − μ_s| / (μ_d + μ_s)`. Meant for non-negative images.
pub fn contrast(img: &[f64], mask: &RegionMask, class: Option<u8>) -> Result<f64> {
    let s = region_stats(img, mask, class)?;
    let denom = s.mean_defect + s.mean_sound;
    if denom == 0.0 {
        return Err(MetricsError::ZeroMeanSum);
    }
    Ok((s.mean_defect - s.mean_sound).abs() / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    pub linear: f64,
    /// `20·log10(linear)`, or [`SNR_DB_SENTINEL`] when `linear == 0`.
    pub db: f64,
}

impl Snr {
    pub fn from_linear(linear: f64) -> Self {
        let db = if linear > 0.0 {
            20.0 * linear.log10()
        } else {
            SNR_DB_SENTINEL
        };
        Self { linear, db }
    }
}

/// `|μ_d − μ_s| / σ_s` with σ_s the population standard deviation of the sound region.
pub fn snr(img: &[f64], mask: &RegionMask, class: Option<u8>) -> Result<Snr> {
    let s = region_stats(img, mask, class)?;
    if s.std_sound == 0.0 {
        return Err(MetricsError::DegenerateSound);
    }
    Ok(Snr::from_linear((s.mean_defect - s.mean_sound).abs() / s.std_sound))
}

/// Intersection over union of the defect pixels (any class). Two empty masks score 1.
pub fn iou(pred: &RegionMask, gt: &RegionMask) -> Result<f64> {
    if pred.n_y != gt.n_y || pred.n_x != gt.n_x {
        return Err(MetricsError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            pred.n_y, pred.n_x, gt.n_y, gt.n_x
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Maps an image onto `[0, 1]`; `None` for constant images.
pub fn normalize_minmax(img: &[f64]) -> Option<Vec<f64>> {
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0 && range.is_finite()) {
        return None;
    }
    Some(img.iter().map(|&v| (v - lo) / range).collect())
}
