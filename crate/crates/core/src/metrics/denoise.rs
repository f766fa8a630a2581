//! Reconstruct a sequence, run PCA on the result and score the leading PCs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{contrast, normalize_minmax, snr, MetricsError, RegionMask, Result, Snr, SNR_DB_SENTINEL};
use crate::baselines::pca;
use crate::data::{reshape_raster, ThermogramSequence};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// Anything that maps a sequence to a same-shaped reconstruction.
pub trait SequenceReconstructor {
    fn reconstruct(&self, seq: &ThermogramSequence) -> std::result::Result<ThermogramSequence, BoxError>;
}

/// Returns its input; scoring through it gives the raw-PCA curves.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReconstructor;

impl SequenceReconstructor for IdentityReconstructor {
    fn reconstruct(&self, seq: &ThermogramSequence) -> std::result::Result<ThermogramSequence, BoxError> {
        Ok(seq.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcCurveRow {
    /// 1-based.
    pub pc_index: usize,
    /// Mean over defect classes of the min-max normalized PC image's contrast.
    pub contrast: f64,
    pub snr_db: f64,
}

impl PcCurveRow {
    pub fn csv(rows: &[PcCurveRow]) -> String {
        let mut out = String::from("pc_index,contrast,snr_db\n");
        for r in rows {
            let _ = writeln!(out, "{},{:?},{:?}", r.pc_index, r.contrast, r.snr_db);
        }
        out
    }

    /// Row with the highest contrast, first on ties.
    pub fn best(rows: &[PcCurveRow]) -> Option<&PcCurveRow> {
        rows.iter().fold(None, |best: Option<&PcCurveRow>, r| match best {
            Some(b) if b.contrast >= r.contrast => Some(b),
            _ => Some(r),
        })
    }
}

/// reconstruct → center → PCA(k) → per-PC contrast and SNR.
///
/// A constant PC image scores contrast 0 and the dB sentinel.
pub fn denoise_then_pca_eval(
    seq: &ThermogramSequence,
    reconstructor: &dyn SequenceReconstructor,
    k: usize,
    mask: &RegionMask,
) -> Result<Vec<PcCurveRow>> {
    if seq.n_y() != mask.n_y() || seq.n_x() != mask.n_x() {
        return Err(MetricsError::DimensionMismatch(format!(
            "sequence {}x{} vs mask {}x{}",
            seq.n_y(),
            seq.n_x(),
            mask.n_y(),
            mask.n_x()
        )));
    }
    let rec = reconstructor
        .reconstruct(seq)
        .map_err(|e| MetricsError::Upstream(e.to_string()))?;
    if (rec.n_t(), rec.n_y(), rec.n_x()) != (seq.n_t(), seq.n_y(), seq.n_x()) {
        return Err(MetricsError::DimensionMismatch("reconstruction changed the sequence shape".into()));
    }
    let centered = reshape_raster(&rec)
        .center()
        .map_err(|e| MetricsError::Upstream(e.to_string()))?;
    let res = pca(&centered, k).map_err(|e| MetricsError::Upstream(e.to_string()))?;
    let classes: Vec<u8> = mask.class_ids().collect();
    if classes.is_empty() {
        return Err(MetricsError::EmptyRegion("defect"));
    }
    let mut rows = Vec::with_capacity(k);
    for j in 0..k {
        let (c, s) = match normalize_minmax(&res.score_image(j)) {
            Some(img) => {
                let mut c_sum = 0.0;
                let mut s_sum = 0.0;
                for &class in &classes {
                    c_sum += match contrast(&img, mask, Some(class)) {
                        Ok(c) => c,
                        Err(MetricsError::ZeroMeanSum) => 0.0,
                        Err(e) => return Err(e),
                    };
                    s_sum += match snr(&img, mask, Some(class)) {
                        Ok(s) => s.linear,
                        Err(MetricsError::DegenerateSound) => f64::MAX,
                        Err(e) => return Err(e),
                    };
                }
                let n = classes.len() as f64;
                (c_sum / n, Snr::from_linear(s_sum / n).db)
            }
            None => (0.0, SNR_DB_SENTINEL),
        };
        rows.push(PcCurveRow {
            pc_index: j + 1,
            contrast: c,
            snr_db: s,
        });
    }
    Ok(rows)
}
