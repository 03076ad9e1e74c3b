//! Unpaired dataset assembly and reproducible batched iteration.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

use super::{load_image, ImageKind, LdrImage, LoadedImage};
use crate::imagecore::HdrImage;

/// One training batch: unpaired LDR and HDR samples with their dataset ids.
pub struct Batch {
    pub ldr: Vec<(usize, LdrImage)>,
    pub hdr: Vec<(usize, HdrImage)>,
}

/// Unpaired collection of LDR and HDR file references. No pairing relation is
/// stored; iteration shuffles the two sides independently.
pub struct UnpairedDataset {
    ldr_items: Vec<PathBuf>,
    hdr_items: Vec<PathBuf>,
    seed: u64,
}

const LDR_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];
const HDR_EXTS: [&str; 2] = ["hdr", "pfm"];

fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if path.is_file() && exts.contains(&ext.as_str()) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl UnpairedDataset {
    /// Scan `ldr_dir` for PNG/JPEG and `hdr_dir` for .hdr/.pfm files.
    pub fn from_dirs(ldr_dir: &Path, hdr_dir: &Path, seed: u64) -> Result<Self> {
        let ldr_items = list_files(ldr_dir, &LDR_EXTS)?;
        let hdr_items = list_files(hdr_dir, &HDR_EXTS)?;
        if ldr_items.is_empty() {
            return Err(CoreError::Dataset(format!("no LDR images in {}", ldr_dir.display())));
        }
        if hdr_items.is_empty() {
            return Err(CoreError::Dataset(format!("no HDR images in {}", hdr_dir.display())));
        }
        Ok(UnpairedDataset { ldr_items, hdr_items, seed })
    }

    pub fn ldr_len(&self) -> usize {
        self.ldr_items.len()
    }

    pub fn hdr_len(&self) -> usize {
        self.hdr_items.len()
    }

    pub fn ldr_path(&self, id: usize) -> &Path {
        &self.ldr_items[id]
    }

    pub fn hdr_path(&self, id: usize) -> &Path {
        &self.hdr_items[id]
    }

    pub fn load_ldr(&self, id: usize) -> Result<LdrImage> {
        match load_image(&self.ldr_items[id], ImageKind::Ldr)? {
            LoadedImage::Ldr(l) => Ok(l),
            LoadedImage::Hdr(_) => unreachable!(),
        }
    }

    pub fn load_hdr(&self, id: usize) -> Result<HdrImage> {
        match load_image(&self.hdr_items[id], ImageKind::Hdr)? {
            LoadedImage::Hdr(h) => Ok(h),
            LoadedImage::Ldr(_) => unreachable!(),
        }
    }

    /// Shuffled sample-id order for one epoch; deterministic in (seed, epoch).
    pub fn epoch_order(&self, epoch: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch.wrapping_mul(0x9e37_79b9)));
        let mut ldr: Vec<usize> = (0..self.ldr_items.len()).collect();
        let mut hdr: Vec<usize> = (0..self.hdr_items.len()).collect();
        ldr.shuffle(&mut rng);
        hdr.shuffle(&mut rng);
        (ldr, hdr)
    }

    /// Number of full batches per epoch. Drop-last policy; the epoch covers
    /// the shorter domain.
    pub fn batches_per_epoch(&self, batch: usize) -> usize {
        (self.ldr_items.len() / batch).min(self.hdr_items.len() / batch)
    }

    /// Full-batch count for one side only (count arithmetic helper).
    pub fn full_batches(count: usize, batch: usize) -> usize {
        count / batch
    }

    /// Load the batches of one epoch lazily.
    pub fn epoch_batches(
        &self,
        epoch: u64,
        batch: usize,
    ) -> impl Iterator<Item = Result<Batch>> + '_ {
        let (ldr_order, hdr_order) = self.epoch_order(epoch);
        let n = self.batches_per_epoch(batch);
        (0..n).map(move |b| {
            let mut ldr = Vec::with_capacity(batch);
            let mut hdr = Vec::with_capacity(batch);
            for i in 0..batch {
                let lid = ldr_order[b * batch + i];
                let hid = hdr_order[b * batch + i];
                ldr.push((lid, self.load_ldr(lid)?));
                hdr.push((hid, self.load_hdr(hid)?));
            }
            Ok(Batch { ldr, hdr })
        })
    }
}
