//! Attention-informed adaptive band over a student × teacher cost matrix.
//!
//! For student row `i` (1-based) with attention row `Aᵢ` over `T` teacher
//! tokens:
//!
//! * center `cᵢ = α Σⱼ j·Aᵢⱼ + (1 − α)·i·T/S` (teacher index `j` 1-based),
//! * entropy `Hᵢ = −Σⱼ Aᵢⱼ log Aᵢⱼ`,
//! * width `wᵢ = b + β·Hᵢ`,
//!
//! and entry `(i, j)` lies outside the band when `|j − cᵢ| > wᵢ`. Band
//! geometry is never differentiated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ValueGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandParams {
    /// Minimum band half-width in tokens (b).
    pub base_width: f64,
    /// Entropy sensitivity (β).
    pub entropy_sensitivity: f64,
    /// Blend between attention center and proportional diagonal (α).
    pub blend: f64,
    /// Additive cost outside the band (λ_band).
    pub penalty: f64,
}

impl Default for BandParams {
    fn default() -> Self {
        Self {
            base_width: 5.0,
            entropy_sensitivity: 2.0,
            blend: 0.7,
            penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    pub entropies: Vec<f64>,
    pub teacher_len: usize,
    pub params: BandParams,
}

impl BandSpec {
    pub fn student_len(&self) -> usize {
        self.centers.len()
    }

    /// Whether 0-based entry `(i, j)` is penalized.
    pub fn outside(&self, i: usize, j: usize) -> bool {
        ((j + 1) as f64 - self.centers[i]).abs() > self.widths[i]
    }
}

/// Row-stochasticity tolerance for attention rows fed to [`build_band`].
pub const STOCHASTIC_TOL: f64 = 1e-6;

pub fn build_band(attention: &ValueGrid, params: BandParams) -> Result<BandSpec> {
    let (s, t) = attention.shape();
    if s == 0 || t == 0 {
        return Err(Error::Empty("attention matrix".into()));
    }
    let mut centers = Vec::with_capacity(s);
    let mut widths = Vec::with_capacity(s);
    let mut entropies = Vec::with_capacity(s);
    for i in 0..s {
        let row = attention.row(i);
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&a| a < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attention row {i} is not a distribution (sum {total})"
            )));
        }
        let soft_center: f64 = row.iter().enumerate().map(|(j, a)| (j + 1) as f64 * a).sum();
        let diagonal = (i + 1) as f64 * t as f64 / s as f64;
        let entropy: f64 = -row.iter().filter(|&&a| a > 0.0).map(|a| a * a.ln()).sum::<f64>();
        centers.push(params.blend * soft_center + (1.0 - params.blend) * diagonal);
        entropies.push(entropy);
        widths.push(params.base_width + params.entropy_sensitivity * entropy);
    }
    Ok(BandSpec {
        centers,
        widths,
        entropies,
        teacher_len: t,
        params,
    })
}

/// `C̃ = C + λ_band · 1[|j − cᵢ| > wᵢ]`.
pub fn apply_band(cost: &ValueGrid, band: &BandSpec) -> Result<ValueGrid> {
    if cost.shape() != (band.student_len(), band.teacher_len) {
        return Err(Error::shape(
            "banded cost",
            format!("{:?}", (band.student_len(), band.teacher_len)),
            format!("{:?}", cost.shape()),
        ));
    }
    let mut out = cost.clone();
    if band.params.penalty == 0.0 {
        return Ok(out);
    }
    for i in 0..cost.rows() {
        for j in 0..cost.cols() {
            if band.outside(i, j) {
                out[(i, j)] += band.params.penalty;
            }
        }
    }
    Ok(out)
}
