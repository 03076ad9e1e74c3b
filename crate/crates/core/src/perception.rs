//! Artifact/exposure perception: heuristic mask generation, the provider
//! interface (deterministic heuristic by default, optional remote endpoint)
//! and the per-epoch report cache.
//!
//! Hard (binary) masks drive reporting and generator gating; soft sigmoid
//! masks with a small temperature drive the differentiable loss. Hard counts
//! always equal the soft masks binarized at 0.5.

use std::collections::HashMap;

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};
use crate::imagecore::luminance;

/// Per-image artifact / overexposure / underexposure maps in `[0,1]`.
#[derive(Debug, Clone)]
pub struct SaliencyTriplet {
    pub artifact: Array2<f32>,
    pub over: Array2<f32>,
    pub under: Array2<f32>,
}

impl SaliencyTriplet {
    /// Gating identity: all-ones maps.
    pub fn neutral(height: usize, width: usize) -> Self {
        SaliencyTriplet {
            artifact: Array2::ones((height, width)),
            over: Array2::ones((height, width)),
            under: Array2::ones((height, width)),
        }
    }

    pub fn is_neutral(&self) -> bool {
        self.artifact.iter().all(|&v| v == 1.0)
            && self.over.iter().all(|&v| v == 1.0)
            && self.under.iter().all(|&v| v == 1.0)
    }
}

/// Hard pixel counts behind the perception loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCounts {
    pub artifact: u64,
    pub over: u64,
    pub under: u64,
    pub total: u64,
}

/// One provider answer for one image.
#[derive(Debug, Clone)]
pub struct PerceptionReport {
    pub has_artifacts: bool,
    pub saliency: SaliencyTriplet,
    pub counts: PixelCounts,
    pub provider_id: String,
}

/// Which generator output the report describes. An LDR output is judged only
/// on artifacts; exposure extremes are legitimate LDR content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    HdrOutput,
    LdrOutput,
}

/// Thresholds and kernel parameters of the heuristic masks.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicParams {
    pub t_over: f32,
    pub t_under: f32,
    pub blur_sigma: f32,
    pub lap_threshold: f32,
    /// Sigmoid temperature of the soft mask variants.
    pub temperature: f32,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        HeuristicParams {
            t_over: 0.95,
            t_under: 0.05,
            blur_sigma: 1.5,
            lap_threshold: 0.1,
            temperature: 0.02,
        }
    }
}

impl HeuristicParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_under && self.t_under < self.t_over && self.t_over < 1.0) {
            return Err(CoreError::Parameter(format!(
                "exposure thresholds must satisfy 0 < t_under < t_over < 1, got ({}, {})",
                self.t_under, self.t_over
            )));
        }
        if self.blur_sigma <= 0.0 {
            return Err(CoreError::Parameter("blur_sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i32;
    let mut taps: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let taps = gaussian_kernel_1d(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w) = img.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let sx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += t * img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let sy = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += t * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// 3x3 Laplacian (4-neighbour stencil) with replicated borders.
pub fn laplacian(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let at = |y: isize, x: isize| {
        img[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]]
    };
    let mut out = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[[y as usize, x as usize]] =
                at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
        }
    }
    out
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Hard over/under exposure masks by luminance thresholding.
pub fn heuristic_exposure_masks(
    pixels: &Array3<f32>,
    t_over: f32,
    t_under: f32,
) -> Result<(Array2<f32>, Array2<f32>)> {
    if !(0.0 < t_under && t_under < t_over && t_over < 1.0) {
        return Err(CoreError::Parameter(format!(
            "need 0 < t_under < t_over < 1, got ({t_under}, {t_over})"
        )));
    }
    let lum = luminance(pixels);
    let over = lum.mapv(|l| if l >= t_over { 1.0 } else { 0.0 });
    let under = lum.mapv(|l| if l <= t_under { 1.0 } else { 0.0 });
    Ok((over, under))
}

/// Soft (sigmoid) over/under exposure masks; binarize at 0.5 to recover the
/// hard masks.
pub fn soft_exposure_masks(
    pixels: &Array3<f32>,
    params: &HeuristicParams,
) -> Result<(Array2<f32>, Array2<f32>)> {
    params.validate()?;
    let lum = luminance(pixels);
    let over = lum.mapv(|l| sigmoid((l - params.t_over) / params.temperature));
    let under = lum.mapv(|l| sigmoid((params.t_under - l) / params.temperature));
    Ok((over, under))
}

/// Hard artifact mask: Laplacian-of-Gaussian response above threshold.
pub fn heuristic_artifact_mask(
    pixels: &Array3<f32>,
    blur_sigma: f32,
    lap_threshold: f32,
) -> Result<Array2<f32>> {
    if blur_sigma <= 0.0 {
        return Err(CoreError::Parameter("blur_sigma must be > 0".into()));
    }
    let lum = luminance(pixels);
    let lap = laplacian(&gaussian_blur(&lum, blur_sigma));
    Ok(lap.mapv(|v| if v.abs() >= lap_threshold { 1.0 } else { 0.0 }))
}

/// Soft artifact mask matching [`heuristic_artifact_mask`] at threshold 0.5.
pub fn soft_artifact_mask(pixels: &Array3<f32>, params: &HeuristicParams) -> Result<Array2<f32>> {
    params.validate()?;
    let lum = luminance(pixels);
    let lap = laplacian(&gaussian_blur(&lum, params.blur_sigma));
    Ok(lap.mapv(|v| sigmoid((v.abs() - params.lap_threshold) / params.temperature)))
}

fn count(mask: &Array2<f32>) -> u64 {
    mask.iter().filter(|&&v| v >= 0.5).count() as u64
}

/// Answers artifact/exposure queries for generated images.
pub trait PerceptionProvider {
    fn id(&self) -> &str;

    /// Analyze one `[0,1]`-range image (`(3,H,W)`).
    fn query(&self, pixels: &Array3<f32>, role: Role) -> Result<PerceptionReport>;
}

/// Deterministic provider: pure function of the image and parameters.
#[derive(Debug, Clone, Default)]
pub struct HeuristicProvider {
    pub params: HeuristicParams,
}

impl HeuristicProvider {
    pub fn new(params: HeuristicParams) -> Result<Self> {
        params.validate()?;
        Ok(HeuristicProvider { params })
    }
}

impl PerceptionProvider for HeuristicProvider {
    fn id(&self) -> &str {
        "heuristic"
    }

    fn query(&self, pixels: &Array3<f32>, role: Role) -> Result<PerceptionReport> {
        let p = &self.params;
        p.validate()?;
        let (_, h, w) = pixels.dim();
        let artifact = heuristic_artifact_mask(pixels, p.blur_sigma, p.lap_threshold)?;
        let (over, under) = match role {
            Role::HdrOutput => heuristic_exposure_masks(pixels, p.t_over, p.t_under)?,
            Role::LdrOutput => (Array2::zeros((h, w)), Array2::zeros((h, w))),
        };
        let counts = PixelCounts {
            artifact: count(&artifact),
            over: count(&over),
            under: count(&under),
            total: (h * w) as u64,
        };
        Ok(PerceptionReport {
            has_artifacts: counts.artifact > 0,
            saliency: SaliencyTriplet { artifact, over, under },
            counts,
            provider_id: self.id().to_string(),
        })
    }
}

/// Report cache refreshed once per epoch. Before the first refresh, neutral
/// gating maps and zero counts are served.
#[derive(Default)]
pub struct PerceptionCache {
    reports: HashMap<String, PerceptionReport>,
    epoch: Option<u64>,
}

impl PerceptionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn epoch(&self) -> Option<u64> {
        self.epoch
    }

    pub fn get(&self, key: &str) -> Option<&PerceptionReport> {
        self.reports.get(key)
    }

    /// Gating saliency for a sample; all-ones before the first refresh.
    pub fn saliency_or_neutral(&self, key: &str, height: usize, width: usize) -> SaliencyTriplet {
        match self.reports.get(key) {
            Some(r) => r.saliency.clone(),
            None => SaliencyTriplet::neutral(height, width),
        }
    }

    pub fn insert(&mut self, key: String, report: PerceptionReport) {
        self.reports.insert(key, report);
    }

    pub fn stamp(&mut self, epoch: u64) {
        self.epoch = Some(epoch);
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }
}

/// Refresh the cache from a set of generated outputs.
pub fn refresh_cache(
    cache: &mut PerceptionCache,
    outputs: &[(String, Array3<f32>, Role)],
    provider: &dyn PerceptionProvider,
    epoch: u64,
) -> Result<()> {
    for (key, pixels, role) in outputs {
        let report = provider.query(pixels, *role)?;
        cache.insert(key.clone(), report);
    }
    cache.stamp(epoch);
    Ok(())
}

pub mod remote;
