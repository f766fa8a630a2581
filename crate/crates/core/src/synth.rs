//! Synthetic pulsed-thermography panels.
//!
//! Each pixel follows the one-dimensional response of an adiabatic plate to an
//! instantaneous surface pulse:
//!
//! ```text
//! T(t) = A(x) / sqrt(t) * (1 + 2 * sum_{n=1..6} exp(-n^2 d^2 / (alpha t))) + noise
//! ```
//!
//! where `d` is the depth of the defect under the pixel (or the plate
//! thickness for sound pixels) and `A(x)` carries the pulse energy and a
//! linear left-to-right illumination slope. There is no lateral diffusion.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ThermogramSequence};
use crate::metrics::RegionMask;
use crate::rng::substream;

/// Number of image-source reflection terms kept in the series.
pub const REFLECTION_TERMS: usize = 6;

pub const DEFAULT_N_T: usize = 128;
pub const DEFAULT_DT: f64 = 0.04;
/// Relative noise used by the presets: a fraction of the peak noiseless value.
pub const DEFAULT_NOISE_REL_PEAK: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid panel: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    /// Disc centre row, pixels.
    pub y: f64,
    /// Disc centre column, pixels.
    pub x: f64,
    pub radius: f64,
    /// Depth below the inspected surface, mm.
    pub depth: f64,
}

impl Defect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 - self.y, x as f64 - self.x);
        dy * dy + dx * dx <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub n_y: usize,
    pub n_x: usize,
    /// Plate thickness, mm.
    pub thickness: f64,
    /// Thermal diffusivity, mm²/s.
    pub diffusivity: f64,
    pub defects: Vec<Defect>,
    pub pulse_energy: f64,
    /// Fractional illumination slope across the panel width.
    pub heating_gradient: f64,
    /// Standard deviation of the additive Gaussian noise, signal units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PanelSpec {
    /// 64×64 plate, 4 mm thick, with 0.5/1/2/3 mm deep discs in the four quadrants.
    pub fn default_panel(seed: u64) -> Self {
        Self::quadrant_panel(64, 6.0, seed)
    }

    /// 180×180 plate with the same defect layout scaled to the frame.
    pub fn large_panel(seed: u64) -> Self {
        Self::quadrant_panel(180, 16.0, seed)
    }

    fn quadrant_panel(size: usize, radius: f64, seed: u64) -> Self {
        let (lo, hi) = (size as f64 * 0.25, size as f64 * 0.75);
        let depths = [0.5, 1.0, 2.0, 3.0];
        let centres = [(lo, lo), (lo, hi), (hi, lo), (hi, hi)];
        let defects = centres
            .iter()
            .zip(depths)
            .map(|(&(y, x), depth)| Defect {
                y,
                x,
                radius,
                depth,
            })
            .collect();
        let spec = PanelSpec {
            n_y: size,
            n_x: size,
            thickness: 4.0,
            diffusivity: 1.0,
            defects,
            pulse_energy: 1.0,
            heating_gradient: 0.1,
            noise_sigma: 0.0,
            seed,
        };
        spec.with_relative_noise(DEFAULT_NOISE_REL_PEAK, DEFAULT_DT)
    }

    /// Sets `noise_sigma` to `rel` times the largest noiseless value, which
    /// occurs in the first frame (`t = dt`).
    pub fn with_relative_noise(mut self, rel: f64, dt: f64) -> Self {
        let mut peak = 0.0f64;
        for y in 0..self.n_y {
            for x in 0..self.n_x {
                peak = peak.max(self.noiseless(y, x, dt));
            }
        }
        self.noise_sigma = rel * peak;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_y == 0 || self.n_x == 0 {
            return bad(format!("empty frame {}x{}", self.n_y, self.n_x));
        }
        if !(self.thickness > 0.0 && self.diffusivity > 0.0 && self.pulse_energy > 0.0) {
            return bad("thickness, diffusivity and pulse energy must be > 0".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.heating_gradient.abs() >= 2.0 || !self.heating_gradient.is_finite() {
            return bad(format!(
                "heating_gradient {} would make the illumination non-positive",
                self.heating_gradient
            ));
        }
        for (i, d) in self.defects.iter().enumerate() {
            if !(d.depth > 0.0 && d.depth < self.thickness) {
                return bad(format!("defect {i}: depth {} outside (0, {})", d.depth, self.thickness));
            }
            if !(d.radius > 0.0)
                || d.y - d.radius < 0.0
                || d.x - d.radius < 0.0
                || d.y + d.radius > (self.n_y - 1) as f64
                || d.x + d.radius > (self.n_x - 1) as f64
            {
                return bad(format!("defect {i}: disc does not lie inside the frame"));
            }
            for (j, e) in self.defects.iter().enumerate().skip(i + 1) {
                let dist = ((d.y - e.y).powi(2) + (d.x - e.x).powi(2)).sqrt();
                if dist <= d.radius + e.radius {
                    return bad(format!("defects {i} and {j} overlap"));
                }
            }
        }
        Ok(())
    }

    /// Depth of the reflecting interface under pixel `(y, x)`.
    pub fn depth_at(&self, y: usize, x: usize) -> f64 {
        self.defects
            .iter()
            .find(|d| d.contains(y, x))
            .map_or(self.thickness, |d| d.depth)
    }

    /// Pulse energy times the illumination field.
    pub fn amplitude_at(&self, x: usize) -> f64 {
        self.pulse_energy * (1.0 + self.heating_gradient * (x as f64 / self.n_x as f64 - 0.5))
    }

    /// Closed-form surface response without noise at time `t > 0`.
    pub fn noiseless(&self, y: usize, x: usize, t: f64) -> f64 {
        plate_response(self.amplitude_at(x), self.depth_at(y, x), self.diffusivity, t)
    }

    /// Class mask: one class per distinct depth, ids ascending with depth.
    pub fn region_mask(&self) -> RegionMask {
        let mut depths: Vec<f64> = self.defects.iter().map(|d| d.depth).collect();
        depths.sort_by(f64::total_cmp);
        depths.dedup();
        let mut labels = vec![0u8; self.n_y * self.n_x];
        for y in 0..self.n_y {
            for x in 0..self.n_x {
                if let Some(d) = self.defects.iter().find(|d| d.contains(y, x)) {
                    let class = depths.iter().position(|&v| v == d.depth).unwrap();
                    labels[y * self.n_x + x] = class as u8 + 1;
                }
            }
        }
        RegionMask::with_depths(self.n_y, self.n_x, labels, depths)
            .expect("labels built from the class list")
    }
}

/// `amplitude / sqrt(t) * (1 + 2 Σ_{n=1..6} exp(-n² depth² / (diffusivity t)))`.
pub fn plate_response(amplitude: f64, depth: f64, diffusivity: f64, t: f64) -> f64 {
    let u = depth * depth / (diffusivity * t);
    let series: f64 = (1..=REFLECTION_TERMS)
        .map(|n| (-((n * n) as f64) * u).exp())
        .sum();
    amplitude / t.sqrt() * (1.0 + 2.0 * series)
}

/// Renders `n_t` frames at `t = dt, 2dt, ...` plus the exact defect mask.
pub fn generate(
    spec: &PanelSpec,
    n_t: usize,
    dt: f64,
) -> Result<(ThermogramSequence, RegionMask), SynthError> {
    spec.validate()?;
    if n_t < 2 || !(dt > 0.0) {
        return Err(SynthError::InvalidSpec(format!("need n_t >= 2 and dt > 0, got {n_t}, {dt}")));
    }
    let (n_y, n_x) = (spec.n_y, spec.n_x);
    let depth: Vec<f64> = (0..n_y * n_x).map(|p| spec.depth_at(p / n_x, p % n_x)).collect();
    let mut frames = Vec::with_capacity(n_t * n_y * n_x);
    for k in 0..n_t {
        let t = (k + 1) as f64 * dt;
        for p in 0..n_y * n_x {
            let amp = spec.amplitude_at(p % n_x);
            frames.push(plate_response(amp, depth[p], spec.diffusivity, t));
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = substream(spec.seed, "synth/noise");
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        frames.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let seq = ThermogramSequence::new(n_t, n_y, n_x, dt, frames)?;
    Ok((seq, spec.region_mask()))
}
