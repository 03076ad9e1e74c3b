//! Image file I/O: PNG/JPEG for LDR, Radiance RGBE (.hdr) and PFM for HDR.
//!
//! The RGBE and PFM codecs are implemented here directly; both formats are
//! simple enough that carrying a heavy codec dependency is not worth it.
//! Writers emit flat (non-RLE) RGBE scanlines, the reader handles both RLE
//! and flat data. PFM is read in both little- and big-endian variants and
//! written little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;

use crate::error::{CoreError, Result};

use super::{HdrImage, LdrImage};

/// Requested image domain for [`load_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    Ldr,
    Hdr,
}

/// Either image domain, as returned by [`load_image`].
#[derive(Debug, Clone)]
pub enum LoadedImage {
    Ldr(LdrImage),
    Hdr(HdrImage),
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Load an image from disk. LDR accepts png/jpg, HDR accepts .hdr (Radiance
/// RGBE) and .pfm.
pub fn load_image(path: &Path, kind: ImageKind) -> Result<LoadedImage> {
    let ext = extension(path);
    match kind {
        ImageKind::Ldr => match ext.as_str() {
            "png" | "jpg" | "jpeg" => Ok(LoadedImage::Ldr(load_ldr(path)?)),
            other => Err(CoreError::Format(format!("unsupported LDR extension: {other:?}"))),
        },
        ImageKind::Hdr => match ext.as_str() {
            "hdr" => Ok(LoadedImage::Hdr(HdrImage::new(read_rgbe(&mut open(path)?)?)?)),
            "pfm" => Ok(LoadedImage::Hdr(HdrImage::new(read_pfm(&mut open(path)?)?)?)),
            other => Err(CoreError::Format(format!("unsupported HDR extension: {other:?}"))),
        },
    }
}

/// Save an image. LDR goes to PNG, HDR to .hdr or .pfm depending on the
/// extension.
pub fn save_image(img: &LoadedImage, path: &Path) -> Result<()> {
    match img {
        LoadedImage::Ldr(l) => save_ldr(l, path),
        LoadedImage::Hdr(h) => {
            let ext = extension(path);
            let mut w = BufWriter::new(File::create(path)?);
            match ext.as_str() {
                "hdr" => write_rgbe(&mut w, h.pixels()),
                "pfm" => write_pfm(&mut w, h.pixels()),
                other => Err(CoreError::Format(format!("unsupported HDR extension: {other:?}"))),
            }
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn load_ldr(path: &Path) -> Result<LdrImage> {
    let img = image::open(path)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    LdrImage::new(pixels, 8)
}

fn save_ldr(img: &LdrImage, path: &Path) -> Result<()> {
    let (_, h, w) = img.pixels().dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (img.pixels()[[c, y as usize, x as usize]] * 255.0).round() as u8;
        }
    }
    buf.save(path)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// PFM

/// Read a binary PFM color image; handles both endiannesses via the scale sign.
pub fn read_pfm<R: BufRead>(r: &mut R) -> Result<Array3<f32>> {
    let magic = read_token(r)?;
    if magic != "PF" {
        return Err(CoreError::Format(format!("not a color PFM file (magic {magic:?})")));
    }
    let w: usize = read_token(r)?
        .parse()
        .map_err(|_| CoreError::Format("bad PFM width".into()))?;
    let h: usize = read_token(r)?
        .parse()
        .map_err(|_| CoreError::Format("bad PFM height".into()))?;
    let scale: f32 = read_token(r)?
        .parse()
        .map_err(|_| CoreError::Format("bad PFM scale".into()))?;
    let little_endian = scale < 0.0;
    let mut pixels = Array3::zeros((3, h, w));
    // PFM stores rows bottom-to-top
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                let v = if little_endian {
                    r.read_f32::<LittleEndian>()?
                } else {
                    r.read_f32::<BigEndian>()?
                };
                pixels[[c, y, x]] = v;
            }
        }
    }
    Ok(pixels)
}

/// Write a little-endian binary PFM color image.
pub fn write_pfm<W: Write>(w: &mut W, pixels: &Array3<f32>) -> Result<()> {
    let (_, h, wd) = pixels.dim();
    write!(w, "PF\n{wd} {h}\n-1.0\n")?;
    for y in (0..h).rev() {
        for x in 0..wd {
            for c in 0..3 {
                w.write_f32::<LittleEndian>(pixels[[c, y, x]])?;
            }
        }
    }
    Ok(())
}

fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        r.read_exact(&mut b)?;
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b[0]);
    }
    String::from_utf8(tok).map_err(|_| CoreError::Format("non-ASCII PFM header".into()))
}

// ---------------------------------------------------------------------------
// Radiance RGBE

/// Decode one RGBE quadruple to linear floats: `v = c * 2^(e-136)`.
pub fn rgbe_to_f32(r: u8, g: u8, b: u8, e: u8) -> [f32; 3] {
    if e == 0 {
        return [0.0; 3];
    }
    let f = (e as f32 - 136.0).exp2();
    [r as f32 * f, g as f32 * f, b as f32 * f]
}

/// Encode linear floats to one RGBE quadruple.
pub fn f32_to_rgbe(r: f32, g: f32, b: f32) -> [u8; 4] {
    let max = r.max(g).max(b);
    if max <= 1e-32 {
        return [0; 4];
    }
    let exp = max.log2().floor() as i32 + 1;
    let scale = (-exp as f32 + 8.0).exp2(); // 256 / 2^exp
    [
        ((r * scale) as u32).min(255) as u8,
        ((g * scale) as u32).min(255) as u8,
        ((b * scale) as u32).min(255) as u8,
        (exp + 128) as u8,
    ]
}

/// Read a Radiance `.hdr` RGBE image, RLE or flat scanlines.
pub fn read_rgbe<R: BufRead>(r: &mut R) -> Result<Array3<f32>> {
    let mut line = read_line(r)?;
    if !line.starts_with("#?") {
        return Err(CoreError::Format("missing Radiance magic".into()));
    }
    let mut format_ok = false;
    loop {
        line = read_line(r)?;
        if line.is_empty() {
            break;
        }
        if line.starts_with("FORMAT=") {
            if line.trim() != "FORMAT=32-bit_rle_rgbe" {
                return Err(CoreError::Format(format!("unsupported Radiance format {line:?}")));
            }
            format_ok = true;
        }
    }
    if !format_ok {
        return Err(CoreError::Format("Radiance header without FORMAT line".into()));
    }
    let dims = read_line(r)?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "-Y" || parts[2] != "+X" {
        return Err(CoreError::Format(format!("unsupported Radiance orientation {dims:?}")));
    }
    let h: usize = parts[1].parse().map_err(|_| CoreError::Format("bad height".into()))?;
    let w: usize = parts[3].parse().map_err(|_| CoreError::Format("bad width".into()))?;
    let mut pixels = Array3::zeros((3, h, w));
    let mut scan = vec![[0u8; 4]; w];
    for y in 0..h {
        read_rgbe_scanline(r, &mut scan)?;
        for (x, q) in scan.iter().enumerate() {
            let [rr, gg, bb] = rgbe_to_f32(q[0], q[1], q[2], q[3]);
            pixels[[0, y, x]] = rr;
            pixels[[1, y, x]] = gg;
            pixels[[2, y, x]] = bb;
        }
    }
    Ok(pixels)
}

fn read_rgbe_scanline<R: BufRead>(r: &mut R, scan: &mut [[u8; 4]]) -> Result<()> {
    let w = scan.len();
    let mut head = [0u8; 4];
    r.read_exact(&mut head)?;
    let is_rle = head[0] == 2 && head[1] == 2 && ((head[2] as usize) << 8 | head[3] as usize) == w && w >= 8;
    if !is_rle {
        // flat scanline; head is the first pixel
        scan[0] = head;
        for q in scan.iter_mut().skip(1) {
            r.read_exact(q)?;
        }
        return Ok(());
    }
    // component-wise RLE: 4 planes of width w
    for c in 0..4 {
        let mut x = 0usize;
        while x < w {
            let code = r.read_u8()?;
            if code > 128 {
                let run = (code & 0x7f) as usize;
                let v = r.read_u8()?;
                if x + run > w {
                    return Err(CoreError::Format("RGBE run overflow".into()));
                }
                for q in scan[x..x + run].iter_mut() {
                    q[c] = v;
                }
                x += run;
            } else {
                let run = code as usize;
                if run == 0 || x + run > w {
                    return Err(CoreError::Format("RGBE literal overflow".into()));
                }
                for q in scan[x..x + run].iter_mut() {
                    q[c] = r.read_u8()?;
                }
                x += run;
            }
        }
    }
    Ok(())
}

/// Write a Radiance `.hdr` image with flat (non-RLE) scanlines.
pub fn write_rgbe<W: Write>(w: &mut W, pixels: &Array3<f32>) -> Result<()> {
    let (_, h, wd) = pixels.dim();
    write!(w, "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {wd}\n")?;
    for y in 0..h {
        for x in 0..wd {
            let q = f32_to_rgbe(pixels[[0, y, x]], pixels[[1, y, x]], pixels[[2, y, x]]);
            w.write_all(&q)?;
        }
    }
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut buf = Vec::new();
    loop {
        let mut b = [0u8];
        r.read_exact(&mut b)?;
        if b[0] == b'\n' {
            break;
        }
        buf.push(b[0]);
    }
    String::from_utf8(buf).map_err(|_| CoreError::Format("non-ASCII Radiance header".into()))
}
