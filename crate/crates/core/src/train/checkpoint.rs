//! Checkpoint container: a magic line, a one-line JSON manifest, then a
//! little-endian f64 blob addressed by the manifest's tensor index.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "INPAINT-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex of the 32-byte ChaCha seed.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (128-bit).
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub generator_seed: u64,
    pub discriminator_seed: u64,
    pub adam_steps_g: u64,
    pub adam_steps_d: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub blob_len: u64,
    pub crc32: u32,
}

/// Serializes `manifest` (whose tensor index, length and checksum are
/// filled in here) followed by the tensors in the given order.
pub fn encode(mut manifest: CheckpointManifest, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    manifest.tensors.clear();
    for (name, t) in tensors {
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            dtype: "f64-le".into(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.blob_len = blob.len() as u64;
    manifest.crc32 = crc32fast::hash(&blob);
    let json = serde_json::to_string(&manifest)
        .map_err(|e| Error::Invariant(format!("manifest serialization: {e}")))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + json.len() + blob.len() + 2);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], start: usize) -> Result<(&'a [u8], usize)> {
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| Error::CheckpointTruncated("header line is not terminated".into()))?;
    Ok((&bytes[start..end], end + 1))
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let (magic, pos) = take_line(bytes, 0)?;
    if magic != CHECKPOINT_MAGIC.as_bytes() {
        return Err(Error::Parse {
            offset: 0,
            message: "not a checkpoint (bad magic line)".into(),
        });
    }
    let (json, blob_start) = take_line(bytes, pos)?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| Error::Parse {
        offset: pos,
        message: format!("manifest: {e}"),
    })?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::CheckpointVersion {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: CheckpointManifest = serde_json::from_value(value).map_err(|e| Error::Parse {
        offset: pos,
        message: format!("manifest: {e}"),
    })?;
    let blob = &bytes[blob_start..];
    if (blob.len() as u64) < manifest.blob_len {
        return Err(Error::CheckpointTruncated(format!(
            "blob holds {} of {} bytes",
            blob.len(),
            manifest.blob_len
        )));
    }
    if blob.len() as u64 > manifest.blob_len {
        return Err(Error::Parse {
            offset: blob_start + manifest.blob_len as usize,
            message: "trailing bytes after blob".into(),
        });
    }
    let computed = crc32fast::hash(blob);
    if computed != manifest.crc32 {
        return Err(Error::CheckpointChecksum {
            stored: manifest.crc32,
            computed,
        });
    }
    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f64-le" {
            return Err(Error::Parse {
                offset: pos,
                message: format!("unsupported dtype {} for {}", e.dtype, e.name),
            });
        }
        let n: usize = e.shape.iter().product();
        let len = n as u64 * 8;
        if e.offset != expected_offset || e.offset + len > manifest.blob_len {
            return Err(Error::Invariant(format!(
                "tensor {} at offset {} overlaps or exceeds the blob",
                e.name, e.offset
            )));
        }
        expected_offset += len;
        let raw = &blob[e.offset as usize..(e.offset + len) as usize];
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?).is_some() {
            return Err(Error::Invariant(format!("duplicate tensor {}", e.name)));
        }
    }
    if expected_offset != manifest.blob_len {
        return Err(Error::Invariant("blob has unindexed bytes".into()));
    }
    Ok((manifest, tensors))
}

pub fn write(path: &Path, manifest: CheckpointManifest, tensors: &[(String, &Tensor)]) -> Result<()> {
    write_atomic(path, &encode(manifest, tensors)?)
}

pub fn read(path: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
