//! Image-quality metrics: PSNR and SSIM on `(3, H, W)` arrays in `[0,1]`.

use ndarray::Array3;

use crate::error::{CoreError, Result};

/// Division-by-zero guard: identical images report this ceiling instead of
/// infinite PSNR.
pub const PSNR_CAP_DB: f32 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f32 = 1.5;
const SSIM_K1: f32 = 0.01;
const SSIM_K2: f32 = 0.03;

fn check_pair(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.dim().0 != 3 {
        return Err(CoreError::Shape(format!("expected 3 channels, got {}", a.dim().0)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f32> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB as f64) as f32)
}

fn gaussian_window() -> Vec<f32> {
    let half = (SSIM_WINDOW / 2) as i32;
    let mut taps: Vec<f32> = (-half..=half)
        .map(|i| (-(i * i) as f32 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f32 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), averaged over valid window positions and channels.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f32> {
    check_pair(a, b)?;
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Shape(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0f64;
                let mut mu_b = 0.0f64;
                let mut aa = 0.0f64;
                let mut bb = 0.0f64;
                let mut ab = 0.0f64;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = (taps[dy] * taps[dx]) as f64;
                        let va = a[[ch, y0 + dy, x0 + dx]] as f64;
                        let vb = b[[ch, y0 + dy, x0 + dx]] as f64;
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok((total / count as f64) as f32)
}
