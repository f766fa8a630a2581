use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::checkpoint::checkpoint_hash;
use super::{CaaeError, ModelState, Result};
use crate::data::{reshape_raster, unraster, PixelMatrix, ThermogramSequence};
use crate::metrics::{BoxError, SequenceReconstructor};
use crate::stack::ImageStack;

/// `latent_dim` images plus provenance (config, checkpoint and dataset hashes).
pub type LatentImageStack = ImageStack;

const ROWS_PER_TASK: usize = 64;

/// Latents and reconstructions (network units) for every row of a centered
/// matrix, in row order.
pub fn encode_pixels(pm: &PixelMatrix, model: &ModelState) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = &model.config;
    if pm.n_t() != cfg.n_t {
        return Err(CaaeError::Shape(format!("sequence has n_t = {}, model expects {}", pm.n_t(), cfg.n_t)));
    }
    if !pm.is_centered() {
        return Err(CaaeError::Data(crate::data::DataError::NotCentered));
    }
    let t = cfg.n_t;
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = pm
        .as_slice()
        .par_chunks(t * ROWS_PER_TASK)
        .map(|rows| {
            let mut zs = Vec::with_capacity(rows.len() / t * cfg.latent_dim);
            let mut recs = Vec::with_capacity(rows.len());
            for row in rows.chunks_exact(t) {
                let x: Vec<f64> = row.iter().map(|v| v / model.input_scale).collect();
                let (z, rec) = model.forward(&x)?;
                zs.extend(z);
                recs.extend(rec);
            }
            Ok((zs, recs))
        })
        .collect();
    let mut zs = Vec::with_capacity(pm.n_rows() * cfg.latent_dim);
    let mut recs = Vec::with_capacity(pm.as_slice().len());
    for part in parts {
        let (z, r) = part?;
        zs.extend(z);
        recs.extend(r);
    }
    Ok((zs, recs))
}

/// Encodes every pixel; latent image `j` holds coordinate `j` of each pixel's `z`.
pub fn encode_sequence(seq: &ThermogramSequence, model: &ModelState) -> Result<LatentImageStack> {
    let pm = reshape_raster(seq).center()?;
    let (zs, _) = encode_pixels(&pm, model)?;
    let latent = model.config.latent_dim;
    let n_pix = pm.n_rows();
    let images: Vec<Vec<f64>> = (0..latent).map(|j| (0..n_pix).map(|p| zs[p * latent + j]).collect()).collect();
    let labels = (0..latent).map(|j| format!("z{j}")).collect();
    let mut stack = ImageStack::with_labels(seq.n_y(), seq.n_x(), "caae", images, labels)?;
    stack.provenance = json!({
        "config": model.config,
        "checkpoint_sha256": checkpoint_hash(model)?,
        "dataset_sha256": sequence_hash(seq),
        "input_scale": model.input_scale,
    });
    Ok(stack)
}

/// Per-pixel reconstructions re-rastered, with each pixel's mean restored.
pub fn reconstruct_sequence(seq: &ThermogramSequence, model: &ModelState) -> Result<ThermogramSequence> {
    let pm = reshape_raster(seq).center()?;
    let (_, recs) = encode_pixels(&pm, model)?;
    let scaled: Vec<f64> = recs.iter().map(|v| v * model.input_scale).collect();
    let rec_pm = pm.with_rows(scaled)?;
    Ok(unraster(&rec_pm)?)
}

/// SHA-256 over the dimensions, `dt` and the frame values.
pub fn sequence_hash(seq: &ThermogramSequence) -> String {
    let mut h = Sha256::new();
    for d in [seq.n_t(), seq.n_y(), seq.n_x()] {
        h.update((d as u64).to_le_bytes());
    }
    h.update(seq.dt().to_le_bytes());
    for v in seq.frames() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl SequenceReconstructor for ModelState {
    fn reconstruct(&self, seq: &ThermogramSequence) -> std::result::Result<ThermogramSequence, BoxError> {
        Ok(reconstruct_sequence(seq, self)?)
    }
}
