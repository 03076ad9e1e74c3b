//! Checkpoint serialization: a JSON manifest followed by raw little-endian
//! f32 tensor data in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"HDRCYCL1";

/// Run metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Number of fully completed epochs.
    pub epoch: usize,
    /// Number of completed optimization steps.
    pub step: u64,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Writes `tensors` (in the given order) with `meta` to `path`.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, ArrayD<f32>)],
) -> Result<()> {
    let manifest = Manifest {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, arr)| TensorEntry { name: name.clone(), shape: arr.shape().to_vec() })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| CoreError::Format(format!("checkpoint manifest: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(header.len() as u64)?;
    w.write_all(&header)?;
    for (_, arr) in tensors {
        for &v in arr.as_standard_layout().iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back; tensors come out in their stored order.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ArrayD<f32>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Format(format!(
            "not a checkpoint file: bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let manifest: Manifest = serde_json::from_slice(&header)
        .map_err(|e| CoreError::Format(format!("checkpoint manifest: {e}")))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let mut data = vec![0f32; count];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| CoreError::Shape(format!("checkpoint tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name, arr));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CoreError::Format("trailing bytes after checkpoint tensors".into()));
    }
    Ok((manifest.meta, tensors))
}
