//! Binary checkpoints: a magic tag, a JSON manifest, and a flat f32 blob.
//!
//! Layout: `b"CSGDCKPT"`, then a little-endian u64 manifest length and the
//! manifest JSON, then a little-endian u64 blob byte length and the tensor
//! payload as little-endian f32 values. The manifest embeds the network
//! spec plus one entry per tensor (name, shape, dtype, element offset,
//! element count). Nothing time- or host-dependent goes into the file, so
//! saving the same model twice produces identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkSpec;
use crate::model::{build_model, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CSGDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Element offset into the blob.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    producer: String,
    seed: u64,
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
}

/// Side information carried by a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub producer: String,
    pub seed: u64,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

/// Serializes the model. `seed` and `producer` are free-form provenance
/// recorded in the manifest (the seed the run started from, and which
/// pipeline wrote the file).
pub fn save_checkpoint(path: &Path, model: &Model, seed: u64, producer: &str) -> Result<()> {
    let named = model.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for (name, t) in &named {
        let len = t.len() as u64;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len,
        });
        for &x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        offset += len;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        producer: producer.into(),
        seed,
        spec: model.spec.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(8 + 16 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    fs::write(path, out)?;
    Ok(())
}

fn read_u64(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u64> {
    let Some(chunk) = bytes.get(at..at + 8) else {
        return Err(corrupt(path, format!("truncated before {what}")));
    };
    Ok(u64::from_le_bytes(chunk.try_into().unwrap()))
}

/// Restores a model and its manifest metadata, validating the layout:
/// magic, format version, entry dtypes, shape/length agreement, and
/// non-overlapping in-bounds blob ranges.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file (bad magic)"));
    }
    let manifest_len = read_u64(&bytes, 8, path, "manifest length")? as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(path, "manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
        .map_err(|e| corrupt(path, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            path,
            format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let blob_len = read_u64(&bytes, manifest_end, path, "blob length")? as usize;
    let blob_start = manifest_end + 8;
    if bytes.len() != blob_start + blob_len {
        return Err(corrupt(
            path,
            format!(
                "blob length {} disagrees with file size",
                blob_len
            ),
        ));
    }
    if !blob_len.is_multiple_of(4) {
        return Err(corrupt(path, "blob is not a whole number of f32 values"));
    }
    let blob = &bytes[blob_start..];
    let total_elems = (blob_len / 4) as u64;

    // Entries must tile the blob without overlap and agree with their shapes.
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(corrupt(
                path,
                format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype),
            ));
        }
        let product: u64 = entry.shape.iter().map(|&d| d as u64).product();
        if product != entry.len {
            return Err(corrupt(
                path,
                format!(
                    "tensor {}: shape {:?} does not match length {}",
                    entry.name, entry.shape, entry.len
                ),
            ));
        }
        let end = entry
            .offset
            .checked_add(entry.len)
            .filter(|&e| e <= total_elems)
            .ok_or_else(|| {
                corrupt(path, format!("tensor {}: range out of bounds", entry.name))
            })?;
        spans.push((entry.offset, end, &entry.name));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(corrupt(
                path,
                format!("tensor {} overlaps tensor {}", pair[1].2, pair[0].2),
            ));
        }
    }

    let mut model = build_model(&manifest.spec, 0)?;
    let mut named = model.named_tensors_mut();
    for entry in &manifest.tensors {
        let Some((_, slot)) = named.iter_mut().find(|(name, _)| name == &entry.name) else {
            return Err(corrupt(
                path,
                format!("tensor {} does not belong to the embedded spec", entry.name),
            ));
        };
        if slot.shape() != entry.shape.as_slice() {
            return Err(corrupt(
                path,
                format!(
                    "tensor {}: shape {:?} in file, {:?} expected by the spec",
                    entry.name,
                    entry.shape,
                    slot.shape()
                ),
            ));
        }
        let start = entry.offset as usize * 4;
        let data: Vec<f32> = blob[start..start + entry.len as usize * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        **slot = Tensor::new(entry.shape.clone(), data)?;
    }
    let expected = named.len();
    if manifest.tensors.len() != expected {
        return Err(corrupt(
            path,
            format!(
                "manifest lists {} tensors, spec requires {expected}",
                manifest.tensors.len()
            ),
        ));
    }
    Ok((
        model,
        CheckpointMeta {
            producer: manifest.producer,
            seed: manifest.seed,
        },
    ))
}
