//! Principal component thermography.
//!
//! The centered `P × n_t` pixel matrix is decomposed by a thin SVD; the top-k
//! right singular vectors are the temporal components and the projections of
//! each pixel onto them form the score images.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BaselineError, Result};
use crate::data::PixelMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub n_rows: usize,
    pub n_t: usize,
    /// `k` orthonormal temporal basis vectors of length `n_t`.
    pub components: Vec<Vec<f64>>,
    /// Row-major `P × k` projections.
    pub scores: Vec<f64>,
    /// `σ_i² / P`, descending.
    pub explained_variance: Vec<f64>,
    pub singular_values: Vec<f64>,
    /// `‖X‖_F² / P`.
    pub total_variance: f64,
    /// Numerical rank of the input matrix; 0 for an all-zero matrix.
    pub rank: usize,
}

impl PcaResult {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn score(&self, p: usize, j: usize) -> f64 {
        self.scores[p * self.k() + j]
    }

    pub fn score_row(&self, p: usize) -> &[f64] {
        let k = self.k();
        &self.scores[p * k..(p + 1) * k]
    }

    /// Score image of component `j`, one value per pixel.
    pub fn score_image(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|p| self.score(p, j)).collect()
    }

    pub fn score_images(&self) -> Vec<Vec<f64>> {
        (0..self.k()).map(|j| self.score_image(j)).collect()
    }

    /// Fraction of the total variance carried by each component.
    pub fn explained_ratio(&self) -> Vec<f64> {
        if self.total_variance == 0.0 {
            return vec![0.0; self.k()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    /// `scores · components`, the rank-k approximation of the input (row-major `P × n_t`).
    pub fn reconstruct(&self) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; self.n_rows * self.n_t];
        for (p, row) in out.chunks_exact_mut(self.n_t).enumerate() {
            for j in 0..k {
                let s = self.scores[p * k + j];
                for (o, c) in row.iter_mut().zip(&self.components[j]) {
                    *o += s * c;
                }
            }
        }
        out
    }

    /// Projects arbitrary rows of length `n_t` onto the components.
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Top-`k` principal components of a centered pixel matrix.
pub fn pca(pm: &PixelMatrix, k: usize) -> Result<PcaResult> {
    if !pm.is_centered() {
        return Err(BaselineError::NotCentered);
    }
    pca_rows(pm.as_slice(), pm.n_rows(), pm.n_t(), k)
}

/// PCA of a raw row-major `rows × n_t` buffer, no centering requirement.
pub fn pca_rows(data: &[f64], rows: usize, n_t: usize, k: usize) -> Result<PcaResult> {
    let max_k = rows.min(n_t);
    if k == 0 || k > max_k {
        return Err(BaselineError::InvalidK { k, max: max_k });
    }
    debug_assert_eq!(data.len(), rows * n_t);
    let total_sq: f64 = data.iter().map(|v| v * v).sum();
    let total_variance = total_sq / rows as f64;

    if total_sq == 0.0 {
        let components = (0..k)
            .map(|j| (0..n_t).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        return Ok(PcaResult {
            n_rows: rows,
            n_t,
            components,
            scores: vec![0.0; rows * k],
            explained_variance: vec![0.0; k],
            singular_values: vec![0.0; k],
            total_variance: 0.0,
            rank: 0,
        });
    }

    let x = DMatrix::from_row_slice(rows, n_t, data);
    let svd = x.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let sigma_max = svd.singular_values[order[0]];
    let tol = rows.max(n_t) as f64 * f64::EPSILON * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();

    let mut components = Vec::with_capacity(k);
    let mut singular_values = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut c: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let pivot = c.iter().fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        singular_values.push(svd.singular_values[idx]);
    }

    let mut scores = vec![0.0; rows * k];
    for (p, row) in data.chunks_exact(n_t).enumerate() {
        for (j, c) in components.iter().enumerate() {
            scores[p * k + j] = row.iter().zip(c).map(|(a, b)| a * b).sum();
        }
    }
    let explained_variance = singular_values.iter().map(|s| s * s / rows as f64).collect();
    Ok(PcaResult {
        n_rows: rows,
        n_t,
        components,
        scores,
        explained_variance,
        singular_values,
        total_variance,
        rank,
    })
}
