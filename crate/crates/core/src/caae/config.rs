use serde::{Deserialize, Serialize};

use super::{CaaeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaaeConfig {
    pub n_t: usize,
    pub conv_layers: usize,
    pub kernel_size: usize,
    pub channels: usize,
    pub heads: usize,
    pub d_k: usize,
    pub latent_dim: usize,
    pub mlp_hidden: usize,
    pub mask_ratio: f64,
    pub patch_len: usize,
    /// Noise standard deviation as a fraction of the batch standard deviation.
    pub noise_sigma_rel: f64,
    /// Weight of the distillation term.
    pub kd_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training pixels drawn from the sequence; `None` trains on all of them.
    pub subset_size: Option<usize>,
    pub seed: u64,
}

impl CaaeConfig {
    pub fn new(n_t: usize) -> Self {
        let channels = 16;
        let heads = 4;
        Self {
            n_t,
            conv_layers: 3,
            kernel_size: 3,
            channels,
            heads,
            d_k: default_d_k(channels, heads),
            latent_dim: 32,
            mlp_hidden: 128,
            mask_ratio: 0.5,
            patch_len: 8,
            noise_sigma_rel: 0.05,
            kd_weight: 0.1,
            lr: 2e-5,
            batch_size: 128,
            epochs: 50,
            subset_size: Some(1000),
            seed: 0,
        }
    }

    /// Sets channels and heads and re-derives `d_k`.
    pub fn with_width(mut self, channels: usize, heads: usize) -> Self {
        self.channels = channels;
        self.heads = heads;
        self.d_k = default_d_k(channels, heads);
        self
    }

    pub fn corruption(&self) -> Corruption {
        Corruption {
            mask_ratio: self.mask_ratio,
            patch_len: self.patch_len,
            noise_sigma_rel: self.noise_sigma_rel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CaaeError::Config(m));
        if self.n_t < 2 {
            return fail(format!("n_t = {} is too short", self.n_t));
        }
        if self.conv_layers == 0 || self.channels == 0 || self.heads == 0 || self.d_k == 0 {
            return fail("conv_layers, channels, heads and d_k must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.latent_dim == 0 || self.latent_dim > self.n_t {
            return fail(format!("latent_dim {} must lie in 1..={}", self.latent_dim, self.n_t));
        }
        if self.mlp_hidden == 0 || self.batch_size == 0 {
            return fail("mlp_hidden and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        self.corruption().validate(self.n_t)?;
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return fail(format!("kd_weight {} must be a finite non-negative number", self.kd_weight));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if self.subset_size == Some(0) {
            return fail("subset_size must be positive".into());
        }
        Ok(())
    }
}

fn default_d_k(channels: usize, heads: usize) -> usize {
    ((channels as f64 / heads.max(1) as f64).round() as usize).max(4)
}

/// Patch masking plus additive noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Target masked fraction, rounded down to whole patches. `1.0` masks every
    /// grid patch.
    pub mask_ratio: f64,
    pub patch_len: usize,
    pub noise_sigma_rel: f64,
}

impl Corruption {
    pub const NONE: Corruption = Corruption {
        mask_ratio: 0.0,
        patch_len: 1,
        noise_sigma_rel: 0.0,
    };

    pub fn validate(&self, n_t: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(CaaeError::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.patch_len == 0 || self.patch_len > n_t {
            return Err(CaaeError::Config(format!("patch_len {} must lie in 1..={n_t}", self.patch_len)));
        }
        if !(self.noise_sigma_rel >= 0.0 && self.noise_sigma_rel.is_finite()) {
            return Err(CaaeError::Config(format!("noise level {} must be non-negative", self.noise_sigma_rel)));
        }
        Ok(())
    }

    /// Whole patches masked per sample: `⌊mask_ratio · n_t / patch_len⌋`.
    pub fn patches_masked(&self, n_t: usize) -> usize {
        let slots = n_t / self.patch_len;
        // small slack so that e.g. 0.3 · 80 / 8 lands on 3, not 2.999…
        (((self.mask_ratio * n_t as f64) / self.patch_len as f64 + 1e-9).floor() as usize).min(slots)
    }

    pub fn masked_len(&self, n_t: usize) -> usize {
        self.patches_masked(n_t) * self.patch_len
    }
}
