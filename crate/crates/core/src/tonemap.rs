//! Differentiable tone mapping (HDR -> [0,1]) and its inverse.
//!
//! The compressive mu-law operator is used inside every loss that touches an
//! HDR image; Reinhard's global operator is provided for display.

use ndarray::Array3;

use crate::autograd::Var;
use crate::error::{CoreError, Result};
use crate::imagecore::{HdrImage, LdrImage};

/// Mu-law compression parameters.
#[derive(Debug, Clone, Copy)]
pub struct ToneMapParams {
    pub mu: f32,
}

impl Default for ToneMapParams {
    fn default() -> Self {
        ToneMapParams { mu: 5000.0 }
    }
}

impl ToneMapParams {
    pub fn new(mu: f32) -> Result<Self> {
        if mu <= 0.0 {
            return Err(CoreError::Parameter(format!("mu must be > 0, got {mu}")));
        }
        Ok(ToneMapParams { mu })
    }
}

/// `T(y) = ln(1 + mu*y) / ln(1 + mu)` elementwise.
pub fn mu_law_value(y: f32, mu: f32) -> f32 {
    (1.0 + mu * y).ln() / (1.0 + mu).ln()
}

/// `T^-1(t) = ((1 + mu)^t - 1) / mu` elementwise.
pub fn inverse_mu_law_value(t: f32, mu: f32) -> f32 {
    ((1.0 + mu).powf(t) - 1.0) / mu
}

/// Mu-law tone mapping. The input must be pre-scaled to peak <= 1 so the
/// output stays in `[0,1]`; see [`normalize_peak`].
pub fn mu_law(y: &HdrImage, params: ToneMapParams) -> Result<LdrImage> {
    let max = y.pixels().iter().cloned().fold(0.0f32, f32::max);
    if max > 1.0 + 1e-6 {
        return Err(CoreError::Domain(format!(
            "mu_law input must be scaled to [0,1] peak (max {max}); normalize first"
        )));
    }
    let mapped = y.pixels().mapv(|v| mu_law_value(v, params.mu).clamp(0.0, 1.0));
    LdrImage::new(mapped, 8)
}

/// Inverse mu-law; maps `[0,1]` back to `[0,1]`-peak radiance.
pub fn inverse_mu_law(t: &LdrImage, params: ToneMapParams) -> Result<HdrImage> {
    let mapped = t.pixels().mapv(|v| inverse_mu_law_value(v, params.mu).max(0.0));
    HdrImage::new(mapped)
}

/// Inverse mu-law on a raw array; values must lie in `[0,1]`.
pub fn inverse_mu_law_pixels(t: &Array3<f32>, params: ToneMapParams) -> Result<Array3<f32>> {
    if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CoreError::Domain("inverse_mu_law input must be in [0,1]".into()));
    }
    Ok(t.mapv(|v| inverse_mu_law_value(v, params.mu)))
}

/// Reinhard's global operator `y / (1 + y)`; output in `[0,1)`.
pub fn reinhard(y: &HdrImage) -> LdrImage {
    let mapped = y.pixels().mapv(|v| v / (1.0 + v));
    LdrImage::new(mapped, 8).expect("reinhard output always valid")
}

/// Peak radiance of an HDR image and a copy scaled so the peak is 1.0.
/// Returns `(scaled, peak)`; a zero image passes through with peak 1.
pub fn normalize_peak(y: &HdrImage) -> (HdrImage, f32) {
    let max = y.pixels().iter().cloned().fold(0.0f32, f32::max);
    let peak = if max > 0.0 { max } else { 1.0 };
    let scaled = HdrImage::new(y.pixels().mapv(|v| v / peak)).expect("scaled HDR valid");
    (scaled, peak)
}

/// Differentiable mu-law on a tape node (any shape, values >= 0, peak <= 1).
pub fn mu_law_var(y: &Var, mu: f32) -> Var {
    let denom = (1.0 + mu).ln();
    y.mul_scalar(mu).add_scalar(1.0).ln().mul_scalar(1.0 / denom)
}

/// Differentiable per-sample peak normalization followed by mu-law.
/// Peaks are treated as constants (recorded, not differentiated).
pub fn normalized_mu_law_var(y: &Var, mu: f32) -> Var {
    let v = y.value();
    let n = v.shape()[0];
    let mut scales = Vec::with_capacity(n);
    for s in v.axis_iter(ndarray::Axis(0)) {
        let max = s.iter().cloned().fold(0.0f32, f32::max);
        scales.push(if max > 0.0 { 1.0 / max } else { 1.0 });
    }
    mu_law_var(&y.scale_per_sample(&scales), mu)
}
