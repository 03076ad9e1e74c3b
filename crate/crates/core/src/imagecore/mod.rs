//! Image types, file I/O, preprocessing and unpaired dataset assembly.
//!
//! Pixels are stored channel-first, `(3, H, W)`, matching the NCHW layout the
//! network code uses. LDR values live in `[0,1]`, HDR values are non-negative
//! linear radiance.

mod dataset;
mod io;

pub use dataset::{Batch, UnpairedDataset};
pub use io::{
    f32_to_rgbe, load_image, read_pfm, read_rgbe, rgbe_to_f32, save_image, write_pfm, write_rgbe,
    ImageKind, LoadedImage,
};

use ndarray::{Array3, Zip};

use crate::error::{CoreError, Result};

pub const MIN_DIM: usize = 16;

/// Low-dynamic-range image, 3 channels, values in `[0,1]`.
#[derive(Debug, Clone)]
pub struct LdrImage {
    pixels: Array3<f32>,
    pub source_bit_depth: u8,
}

/// Linear-radiance image, 3 channels, non-negative unbounded floats.
#[derive(Debug, Clone)]
pub struct HdrImage {
    pixels: Array3<f32>,
}

impl LdrImage {
    pub fn new(pixels: Array3<f32>, source_bit_depth: u8) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(CoreError::Format(format!("LDR image must have 3 channels, got {c}")));
        }
        if h < MIN_DIM || w < MIN_DIM {
            return Err(CoreError::Format(format!("LDR image too small: {h}x{w}")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::Domain("LDR values must be in [0,1]".into()));
        }
        Ok(LdrImage { pixels, source_bit_depth })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

impl HdrImage {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(CoreError::Format(format!("HDR image must have 3 channels, got {c}")));
        }
        if h < MIN_DIM || w < MIN_DIM {
            return Err(CoreError::Format(format!("HDR image too small: {h}x{w}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Domain(
                "HDR values must be finite and non-negative".into(),
            ));
        }
        Ok(HdrImage { pixels })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Rec. 709 luminance of a `(3,H,W)` pixel array.
pub fn luminance(pixels: &Array3<f32>) -> ndarray::Array2<f32> {
    let r = pixels.index_axis(ndarray::Axis(0), 0);
    let g = pixels.index_axis(ndarray::Axis(0), 1);
    let b = pixels.index_axis(ndarray::Axis(0), 2);
    let mut out = ndarray::Array2::zeros(r.raw_dim());
    Zip::from(&mut out).and(&r).and(&g).and(&b).for_each(|o, &r, &g, &b| {
        *o = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    });
    out
}

/// Per-channel 256-bin CDF-remapping histogram equalization.
///
/// A constant channel is returned unchanged (the remap formula is degenerate
/// there).
pub fn equalize_histogram(img: &LdrImage) -> LdrImage {
    let mut out = img.pixels.clone();
    for c in 0..3 {
        let chan = img.pixels.index_axis(ndarray::Axis(0), c);
        let n = chan.len();
        let mut hist = [0u64; 256];
        for &v in chan.iter() {
            hist[(v * 255.0).round() as usize] += 1;
        }
        if hist.iter().any(|&h| h as usize == n) {
            continue; // constant channel
        }
        let mut lut = [0f32; 256];
        let mut cdf = 0u64;
        for (b, &h) in hist.iter().enumerate() {
            cdf += h;
            lut[b] = cdf as f32 / n as f32;
        }
        let mut dst = out.index_axis_mut(ndarray::Axis(0), c);
        Zip::from(&mut dst).and(&chan).for_each(|d, &v| {
            *d = lut[(v * 255.0).round() as usize];
        });
    }
    LdrImage {
        pixels: out,
        source_bit_depth: img.source_bit_depth,
    }
}

/// `out = clip(gain * in + bias, 0, 1)`; synthetic exposure change.
pub fn synthesize_exposure(img: &LdrImage, gain: f32, bias: f32) -> Result<LdrImage> {
    if gain <= 0.0 {
        return Err(CoreError::Parameter(format!("gain must be > 0, got {gain}")));
    }
    Ok(LdrImage {
        pixels: img.pixels.mapv(|v| (gain * v + bias).clamp(0.0, 1.0)),
        source_bit_depth: img.source_bit_depth,
    })
}

/// Bilinear resize of a `(3,H,W)` array with half-pixel-center sampling.
pub fn resize_pixels(pixels: &Array3<f32>, height: usize, width: usize) -> Result<Array3<f32>> {
    if height == 0 || width == 0 {
        return Err(CoreError::Parameter("resize dims must be positive".into()));
    }
    let (c, sh, sw) = pixels.dim();
    let mut out = Array3::zeros((c, height, width));
    let sy = sh as f32 / height as f32;
    let sx = sw as f32 / width as f32;
    for ci in 0..c {
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let wx = fx - x0 as f32;
                let top = pixels[[ci, y0, x0]] * (1.0 - wx) + pixels[[ci, y0, x1]] * wx;
                let bot = pixels[[ci, y1, x0]] * (1.0 - wx) + pixels[[ci, y1, x1]] * wx;
                out[[ci, y, x]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Ok(out)
}

pub fn resize_ldr(img: &LdrImage, height: usize, width: usize) -> Result<LdrImage> {
    if height < MIN_DIM || width < MIN_DIM {
        return Err(CoreError::Parameter(format!("resize below {MIN_DIM}x{MIN_DIM}")));
    }
    Ok(LdrImage {
        pixels: resize_pixels(&img.pixels, height, width)?.mapv(|v| v.clamp(0.0, 1.0)),
        source_bit_depth: img.source_bit_depth,
    })
}

pub fn resize_hdr(img: &HdrImage, height: usize, width: usize) -> Result<HdrImage> {
    if height < MIN_DIM || width < MIN_DIM {
        return Err(CoreError::Parameter(format!("resize below {MIN_DIM}x{MIN_DIM}")));
    }
    Ok(HdrImage {
        pixels: resize_pixels(&img.pixels, height, width)?.mapv(|v| v.max(0.0)),
    })
}
