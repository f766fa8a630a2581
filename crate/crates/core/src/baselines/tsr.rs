//! Thermal signal reconstruction: a per-pixel polynomial in `ln t` fitted to
//! `ln T`, plus the first and second logarithmic derivatives of the fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BaselineError, Result};
use crate::data::PixelMatrix;

pub const DEFAULT_TSR_DEGREE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsrResult {
    pub degree: usize,
    /// `coefficients[j][p]` multiplies `(ln t)^j` for pixel `p`.
    pub coefficients: Vec<Vec<f64>>,
    /// `d ln T / d ln t` at the evaluation time.
    pub first_derivative: Vec<f64>,
    /// `d² ln T / d (ln t)²` at the evaluation time.
    pub second_derivative: Vec<f64>,
    /// Residual sum of squares of the log-log fit.
    pub residual: Vec<f64>,
    /// `false` where a non-positive sample made the logarithm undefined; those
    /// pixels carry zeros.
    pub valid: Vec<bool>,
    /// Time at which the derivatives are evaluated (frame `n_t / 2`).
    pub eval_time: f64,
}

impl TsrResult {
    pub fn n_invalid(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// Fits every pixel of a raw (uncentered) matrix.
pub fn tsr(pm: &PixelMatrix, degree: usize) -> Result<TsrResult> {
    if pm.is_centered() {
        return Err(BaselineError::Centered);
    }
    let n_t = pm.n_t();
    if degree == 0 || n_t <= degree {
        return Err(BaselineError::InvalidDegree { degree, n_t });
    }
    let log_t: Vec<f64> = (0..n_t).map(|k| ((k + 1) as f64 * pm.dt()).ln()).collect();
    let fit = LogPolyFit::new(&log_t, degree)?;
    let eval_time = (n_t / 2 + 1) as f64 * pm.dt();
    let u_eval = eval_time.ln();

    let per_pixel: Vec<Option<(Vec<f64>, f64)>> = pm
        .as_slice()
        .par_chunks(n_t)
        .map(|row| {
            if row.iter().any(|&v| !(v > 0.0)) {
                return None;
            }
            let y: Vec<f64> = row.iter().map(|v| v.ln()).collect();
            Some(fit.solve(&y))
        })
        .collect();

    let n_pix = pm.n_rows();
    let mut coefficients = vec![vec![0.0; n_pix]; degree + 1];
    let mut first_derivative = vec![0.0; n_pix];
    let mut second_derivative = vec![0.0; n_pix];
    let mut residual = vec![0.0; n_pix];
    let mut valid = vec![false; n_pix];
    for (p, res) in per_pixel.into_iter().enumerate() {
        let Some((c, rss)) = res else { continue };
        for (j, cj) in c.iter().enumerate() {
            coefficients[j][p] = *cj;
        }
        let (d1, d2) = log_derivatives(&c, u_eval);
        first_derivative[p] = d1;
        second_derivative[p] = d2;
        residual[p] = rss;
        valid[p] = true;
    }
    Ok(TsrResult {
        degree,
        coefficients,
        first_derivative,
        second_derivative,
        residual,
        valid,
        eval_time,
    })
}

/// First and second derivative of `Σ c_j u^j` at `u`.
fn log_derivatives(c: &[f64], u: f64) -> (f64, f64) {
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for (j, &cj) in c.iter().enumerate().skip(1) {
        let jf = j as f64;
        d1 += jf * cj * u.powi(j as i32 - 1);
        if j >= 2 {
            d2 += jf * (jf - 1.0) * cj * u.powi(j as i32 - 2);
        }
    }
    (d1, d2)
}

/// Least-squares polynomial fit on a fixed abscissa. The abscissa is affinely
/// mapped onto `[-1, 1]` for the solve and the coefficients are converted back
/// to the monomial basis in the original variable.
struct LogPolyFit {
    pinv: DMatrix<f64>,
    design: DMatrix<f64>,
    /// `to_monomial[(j, i)]`: contribution of scaled coefficient `i` to monomial `u^j`.
    to_monomial: DMatrix<f64>,
}

impl LogPolyFit {
    fn new(u: &[f64], degree: usize) -> Result<Self> {
        let (lo, hi) = u
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let centre = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        let half = if half > 0.0 { half } else { 1.0 };
        let n = u.len();
        let design = DMatrix::from_fn(n, degree + 1, |k, j| ((u[k] - centre) / half).powi(j as i32));
        let svd = design.clone().svd(true, true);
        let eps = 1e-13 * svd.singular_values.max();
        let pinv = svd
            .pseudo_inverse(eps)
            .map_err(|e| BaselineError::Numerical(e.to_string()))?;
        // s^i = ((u - centre) / half)^i = Σ_j binom(i, j) u^j (-centre)^(i-j) / half^i
        let to_monomial = DMatrix::from_fn(degree + 1, degree + 1, |j, i| {
            if j > i {
                0.0
            } else {
                binomial(i, j) * (-centre).powi((i - j) as i32) / half.powi(i as i32)
            }
        });
        Ok(Self {
            pinv,
            design,
            to_monomial,
        })
    }

    /// Monomial coefficients and residual sum of squares.
    fn solve(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let y = DVector::from_column_slice(y);
        let scaled = &self.pinv * &y;
        let rss = (&self.design * &scaled - &y).norm_squared();
        let mono = &self.to_monomial * scaled;
        (mono.iter().copied().collect(), rss)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn single_pixel(series: Vec<f64>, dt: f64) -> PixelMatrix {
        let n_t = series.len();
        PixelMatrix::from_rows(1, 1, n_t, dt, series).unwrap()
    }

    #[test]
    fn inverse_sqrt_decay_recovers_slope() {
        // ln T = -0.5 ln t exactly; the least-squares solution is that line.
        let dt = 0.04;
        let series: Vec<f64> = (1..=128).map(|k| (k as f64 * dt).powf(-0.5)).collect();
        let res = tsr(&single_pixel(series, dt), DEFAULT_TSR_DEGREE).unwrap();
        assert!((res.coefficients[1][0] + 0.5).abs() < 1e-6, "{:?}", res.coefficients);
        assert!(res.coefficients[0][0].abs() < 1e-6);
        for j in 2..=DEFAULT_TSR_DEGREE {
            assert!(res.coefficients[j][0].abs() < 1e-6);
        }
        assert!((res.first_derivative[0] + 0.5).abs() < 1e-6);
        assert!(res.second_derivative[0].abs() < 1e-6);
    }

    #[test]
    fn constant_signal() {
        let res = tsr(&single_pixel(vec![3.0; 20], 0.1), 3).unwrap();
        assert!((res.coefficients[0][0] - 3.0f64.ln()).abs() < 1e-9);
        for j in 1..=3 {
            assert!(res.coefficients[j][0].abs() < 1e-9);
        }
    }

    #[test]
    fn full_degree_interpolates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let series: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
        let res = tsr(&single_pixel(series, 0.5), 5).unwrap();
        assert!(res.residual[0] < 1e-8, "{}", res.residual[0]);
    }

    #[test]
    fn residual_non_increasing_in_degree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let series: Vec<f64> = (1..=40)
            .map(|k| (k as f64 * 0.05).powf(-0.5) + rng.gen_range(0.0..0.05))
            .collect();
        let pm = single_pixel(series, 0.05);
        let residuals: Vec<f64> = (1..8).map(|d| tsr(&pm, d).unwrap().residual[0]).collect();
        for w in residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{residuals:?}");
        }
    }

    #[test]
    fn non_positive_pixels_flagged() {
        let pm = PixelMatrix::from_rows(1, 2, 4, 0.1, vec![1.0, 0.9, 0.8, 0.7, 1.0, -0.1, 0.5, 0.4]).unwrap();
        let res = tsr(&pm, 1).unwrap();
        assert_eq!(res.valid, vec![true, false]);
        assert_eq!(res.n_invalid(), 1);
        assert_eq!(res.coefficients[1][1], 0.0);
    }

    #[test]
    fn argument_errors() {
        let pm = single_pixel(vec![1.0, 2.0, 3.0], 0.1);
        assert!(matches!(tsr(&pm, 0), Err(BaselineError::InvalidDegree { .. })));
        assert!(matches!(tsr(&pm, 3), Err(BaselineError::InvalidDegree { .. })));
        assert!(matches!(tsr(&pm.center().unwrap(), 1), Err(BaselineError::Centered)));
    }
}
