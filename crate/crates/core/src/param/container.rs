//! Binary containers for sparse diffs (`SFT1`) and dense checkpoints (`CKP1`).
//!
//! Both share one framing:
//!
//! ```text
//! magic (4 bytes)
//! u32 LE manifest length, UTF-8 JSON manifest
//! payload (format specific, all integers and reals little-endian)
//! SHA-256 over every preceding byte (32 bytes)
//! ```
//!
//! The `SFT1` payload is, per tensor in manifest order, a `u32` entry count,
//! that many ascending tensor-local `u32` flat indices, then the same number
//! of `f32` deltas. The `CKP1` payload is every tensor's values in manifest
//! order. Decoding validates everything before returning, so a corrupt file
//! never yields a partial artifact.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Fingerprint, Layout, ParamError, ParameterSnapshot, SparseDiff};

pub const SFT_MAGIC: &[u8; 4] = b"SFT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

const DIGEST_LEN: usize = 32;

/// Free-form creation metadata stored in a container manifest.
pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error(
        "truncated container: needed {needed} bytes at offset {offset}, {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checksum mismatch")]
    Checksum,
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("inconsistent container: {0}")]
    Inconsistent(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    count: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    fingerprint: Fingerprint,
    total_params: usize,
    tensors: Vec<TensorRecord>,
    metadata: Metadata,
}

/// A decoded `SFT1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct SftContainer {
    pub diff: SparseDiff,
    pub metadata: Metadata,
}

/// A decoded `CKP1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub snapshot: ParameterSnapshot,
    pub metadata: Metadata,
}

pub fn serialize_diff(diff: &SparseDiff, metadata: &Metadata) -> Vec<u8> {
    let layout = diff.layout();
    let per_tensor: Vec<(Vec<u32>, Vec<f32>)> =
        (0..layout.len()).map(|t| diff.tensor_entries(t)).collect();
    let manifest = Manifest {
        format: "sft".into(),
        fingerprint: layout.fingerprint(),
        total_params: layout.total(),
        tensors: (0..layout.len())
            .map(|t| TensorRecord {
                name: layout.name(t).to_string(),
                shape: layout.shape(t).to_vec(),
                count: Some(per_tensor[t].0.len()),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let mut out = frame_header(SFT_MAGIC, &manifest);
    for (indices, deltas) in &per_tensor {
        out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
        for i in indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for d in deltas {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    seal(out)
}

pub fn deserialize_diff(bytes: &[u8]) -> Result<SftContainer, ContainerError> {
    let (manifest, mut reader) = open_frame(bytes, SFT_MAGIC, "sft")?;
    let layout = manifest_layout(&manifest)?;
    let mut indices = Vec::new();
    let mut deltas = Vec::new();
    for (t, rec) in manifest.tensors.iter().enumerate() {
        let count = reader.u32()? as usize;
        if Some(count) != rec.count {
            return Err(ContainerError::Inconsistent(format!(
                "tensor {} declares {:?} entries, payload has {}",
                rec.name, rec.count, count
            )));
        }
        let range = layout.range(t);
        let mut prev: Option<u32> = None;
        for _ in 0..count {
            let local = reader.u32()?;
            if prev.is_some_and(|p| p >= local) {
                return Err(ParamError::NonAscending(range.start + local as usize).into());
            }
            if local as usize >= range.len() {
                return Err(ParamError::IndexOutOfRange {
                    index: local as usize,
                    total: range.len(),
                }
                .into());
            }
            prev = Some(local);
            indices.push(range.start as u32 + local);
        }
        for _ in 0..count {
            deltas.push(reader.f32()?);
        }
    }
    reader.finish()?;
    let diff = SparseDiff::from_entries(layout, indices, deltas)?;
    Ok(SftContainer {
        diff,
        metadata: manifest.metadata,
    })
}

pub fn serialize_checkpoint(snapshot: &ParameterSnapshot, metadata: &Metadata) -> Vec<u8> {
    let layout = snapshot.layout();
    let manifest = Manifest {
        format: "checkpoint".into(),
        fingerprint: layout.fingerprint(),
        total_params: layout.total(),
        tensors: (0..layout.len())
            .map(|t| TensorRecord {
                name: layout.name(t).to_string(),
                shape: layout.shape(t).to_vec(),
                count: None,
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let mut out = frame_header(CHECKPOINT_MAGIC, &manifest);
    for v in snapshot.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    seal(out)
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ContainerError> {
    let (manifest, mut reader) = open_frame(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    if manifest.tensors.iter().any(|t| t.count.is_some()) {
        return Err(ContainerError::Manifest(
            "checkpoint tensors carry no counts".into(),
        ));
    }
    let layout = manifest_layout(&manifest)?;
    let mut values = Vec::with_capacity(layout.total());
    for _ in 0..layout.total() {
        let v = reader.f32()?;
        if !v.is_finite() {
            return Err(ContainerError::Inconsistent(
                "non-finite parameter value".into(),
            ));
        }
        values.push(v);
    }
    reader.finish()?;
    Ok(Checkpoint {
        snapshot: ParameterSnapshot::from_flat(layout, values)?,
        metadata: manifest.metadata,
    })
}

fn frame_header(magic: &[u8; 4], manifest: &Manifest) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn open_frame<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    format: &str,
) -> Result<(Manifest, Reader<'a>), ContainerError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(ContainerError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found,
        });
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(ContainerError::Truncated {
            offset: 0,
            needed: 8 + DIGEST_LEN,
            available: bytes.len(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ContainerError::Checksum);
    }
    let mut reader = Reader {
        bytes: body,
        pos: 4,
    };
    let len = reader.u32()? as usize;
    let json = reader.take(len)?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    if manifest.format != format {
        return Err(ContainerError::Manifest(format!(
            "expected format {:?}, found {:?}",
            format, manifest.format
        )));
    }
    Ok((manifest, reader))
}

fn manifest_layout(manifest: &Manifest) -> Result<Arc<Layout>, ContainerError> {
    for pair in manifest.tensors.windows(2) {
        if pair[0].name >= pair[1].name {
            return Err(ContainerError::Manifest("tensors not in name order".into()));
        }
    }
    let layout = Layout::new(
        manifest
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect(),
    )?;
    if layout.fingerprint() != manifest.fingerprint {
        return Err(ParamError::FingerprintMismatch {
            expected: manifest.fingerprint.to_hex(),
            found: layout.fingerprint().to_hex(),
        }
        .into());
    }
    if layout.total() != manifest.total_params {
        return Err(ContainerError::Inconsistent(format!(
            "total_params {} but shapes sum to {}",
            manifest.total_params,
            layout.total()
        )));
    }
    Ok(layout)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, ContainerError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(self) -> Result<(), ContainerError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(ContainerError::TrailingBytes(n)),
        }
    }
}

/// Reads the fingerprint of either container without decoding the payload.
pub fn peek_fingerprint(bytes: &[u8]) -> Result<Fingerprint, ContainerError> {
    let magic = bytes.get(..4).unwrap_or_default();
    let (m, f) = if magic == SFT_MAGIC {
        (SFT_MAGIC, "sft")
    } else {
        (CHECKPOINT_MAGIC, "checkpoint")
    };
    open_frame(bytes, m, f).map(|(manifest, _)| manifest.fingerprint)
}
