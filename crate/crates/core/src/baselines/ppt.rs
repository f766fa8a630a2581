//! Pulsed phase thermography: per-pixel DFT over time, phase `atan2(Im, Re)`
//! for bins `0..=n_t/2`.

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Result;
use crate::data::PixelMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// Radix FFT; used automatically for power-of-two lengths.
    Fft,
    /// O(n²) definition.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PptResult {
    /// `phase[f][p]` for bins `f = 0..=n_t/2`.
    pub phase: Vec<Vec<f64>>,
    pub magnitude: Vec<Vec<f64>>,
    pub transform: Transform,
}

pub fn ppt(pm: &PixelMatrix) -> Result<PptResult> {
    let transform = if pm.n_t().is_power_of_two() {
        Transform::Fft
    } else {
        Transform::Direct
    };
    ppt_with(pm, transform)
}

pub fn ppt_with(pm: &PixelMatrix, transform: Transform) -> Result<PptResult> {
    let n_t = pm.n_t();
    let n_bins = n_t / 2 + 1;
    let spectra: Vec<Vec<Complex<f64>>> = match transform {
        Transform::Fft => {
            let fft = FftPlanner::<f64>::new().plan_fft_forward(n_t);
            pm.as_slice()
                .par_chunks(n_t)
                .map(|row| {
                    let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
                    fft.process(&mut buf);
                    buf.truncate(n_bins);
                    buf
                })
                .collect()
        }
        Transform::Direct => pm
            .as_slice()
            .par_chunks(n_t)
            .map(|row| (0..n_bins).map(|f| dft_bin(row, f)).collect())
            .collect(),
    };
    let n_pix = pm.n_rows();
    let mut phase = vec![vec![0.0; n_pix]; n_bins];
    let mut magnitude = vec![vec![0.0; n_pix]; n_bins];
    for (p, spec) in spectra.iter().enumerate() {
        for (f, c) in spec.iter().enumerate() {
            phase[f][p] = c.im.atan2(c.re);
            magnitude[f][p] = c.norm();
        }
    }
    Ok(PptResult {
        phase,
        magnitude,
        transform,
    })
}

/// `Σ_k x_k exp(-2πi f k / n)`.
pub fn dft_bin(x: &[f64], f: usize) -> Complex<f64> {
    let n = x.len();
    let mut acc = Complex::new(0.0, 0.0);
    for (k, &v) in x.iter().enumerate() {
        // reduce f*k mod n first to keep the angle small
        let angle = -2.0 * std::f64::consts::PI * ((f * k) % n) as f64 / n as f64;
        acc += Complex::new(v * angle.cos(), v * angle.sin());
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn pixel(series: Vec<f64>) -> PixelMatrix {
        let n = series.len();
        PixelMatrix::from_rows(1, 1, n, 0.1, series).unwrap()
    }

    /// Phase of bin `f` straight from the definition, in a separate loop.
    fn reference_phase(x: &[f64], f: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, v) in x.iter().enumerate() {
            let a = 2.0 * PI * f as f64 * k as f64 / n;
            re += v * a.cos();
            im -= v * a.sin();
        }
        im.atan2(re)
    }

    #[test]
    fn cosine_and_sine_phases() {
        let cos: Vec<f64> = (0..16).map(|k| (2.0 * PI * 3.0 * k as f64 / 16.0).cos()).collect();
        let sin: Vec<f64> = (0..16).map(|k| (2.0 * PI * 3.0 * k as f64 / 16.0).sin()).collect();
        assert!(reference_phase(&cos, 3).abs() < 1e-9);
        assert!((reference_phase(&sin, 3) + PI / 2.0).abs() < 1e-9);
        for t in [Transform::Fft, Transform::Direct] {
            let c = ppt_with(&pixel(cos.clone()), t).unwrap();
            assert!(c.phase[3][0].abs() < 1e-9);
            let s = ppt_with(&pixel(sin.clone()), t).unwrap();
            assert!((s.phase[3][0] + PI / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_series_only_dc() {
        let res = ppt(&pixel(vec![2.5; 16])).unwrap();
        assert_eq!(res.phase[0][0], 0.0);
        for f in 1..res.magnitude.len() {
            assert!(res.magnitude[f][0] < 1e-9);
        }
    }

    #[test]
    fn fft_and_direct_agree() {
        let series: Vec<f64> = (1..=64).map(|k| (k as f64 * 0.04).powf(-0.5) + 0.01 * (k as f64).sin()).collect();
        let pm = pixel(series);
        let a = ppt_with(&pm, Transform::Fft).unwrap();
        let b = ppt_with(&pm, Transform::Direct).unwrap();
        for f in 0..a.phase.len() {
            assert!((a.phase[f][0] - b.phase[f][0]).abs() < 1e-9, "bin {f}");
            assert!((a.magnitude[f][0] - b.magnitude[f][0]).abs() < 1e-9);
        }
    }

    #[test]
    fn non_power_of_two_uses_direct() {
        let series: Vec<f64> = (0..12).map(|k| (k as f64 * 0.7).cos()).collect();
        let res = ppt(&pixel(series.clone())).unwrap();
        assert_eq!(res.transform, Transform::Direct);
        assert_eq!(res.phase.len(), 7);
        for f in 0..7 {
            assert!((res.phase[f][0] - reference_phase(&series, f)).abs() < 1e-9);
        }
    }

    #[test]
    fn conjugate_symmetry() {
        let series: Vec<f64> = (0..16).map(|k| ((k * k) as f64 * 0.37).sin()).collect();
        for f in 1..8 {
            let a = dft_bin(&series, f);
            let b = dft_bin(&series, 16 - f);
            assert!((a.im.atan2(a.re) + b.im.atan2(b.re)).abs() < 1e-9);
        }
    }
}
