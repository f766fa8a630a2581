use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaaeError, Corruption, Result};

/// One sample's mask: 1 keeps the entry, 0 zeroes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mask: Vec<u8>,
    /// Absolute noise standard deviation added to every entry.
    pub noise_sigma: f64,
}

impl MaskSpec {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBatch {
    pub n_t: usize,
    /// Row-major `rows × n_t`.
    pub data: Vec<f64>,
    pub masks: Vec<MaskSpec>,
}

impl CorruptedBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_t..(i + 1) * self.n_t]
    }
}

/// `M ⊙ S + N(0, σ²)` per row of `batch` (row-major, `n_t` columns).
///
/// Patches sit on the grid `0, patch_len, 2·patch_len, …`; the masked ones are
/// drawn without replacement. `σ = noise_sigma_rel · std(batch)` and noise is
/// added to masked entries too.
pub fn corrupt(batch: &[f64], n_t: usize, c: &Corruption, rng: &mut impl Rng) -> Result<CorruptedBatch> {
    c.validate(n_t)?;
    if n_t == 0 || batch.len() % n_t != 0 {
        return Err(CaaeError::Shape(format!("{} values do not form rows of {n_t}", batch.len())));
    }
    let rows = batch.len() / n_t;
    let sigma = c.noise_sigma_rel * population_std(batch);
    let slots = n_t / c.patch_len;
    let n_masked = c.patches_masked(n_t);
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| CaaeError::Config(e.to_string()))?)
    } else {
        None
    };
    let mut data = batch.to_vec();
    let mut masks = Vec::with_capacity(rows);
    for row in data.chunks_exact_mut(n_t) {
        let mut mask = vec![1u8; n_t];
        if n_masked > 0 {
            for slot in sample(rng, slots, n_masked).iter() {
                mask[slot * c.patch_len..(slot + 1) * c.patch_len].fill(0);
            }
        }
        for (v, &m) in row.iter_mut().zip(&mask) {
            if m == 0 {
                *v = 0.0;
            }
        }
        if let Some(noise) = &noise {
            for v in row.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        masks.push(MaskSpec {
            mask,
            noise_sigma: sigma,
        });
    }
    Ok(CorruptedBatch { n_t, data, masks })
}

pub(crate) fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}
