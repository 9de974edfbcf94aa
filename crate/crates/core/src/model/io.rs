// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint file format.
//!
//! ```text
//! "MOESCP01"                 8-byte magic (last two bytes are the version)
//! u64 little-endian          header length in bytes
//! header                     UTF-8 JSON: {"config": …, "tensors": [{name, shape, offset}, …]}
//! blob                       little-endian f32, row-major, in directory order
//! ```
//!
//! `offset` is the byte offset of each tensor from the start of the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::Checkpoint;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MOESCP01";
const MAGIC_FAMILY: &[u8; 6] = b"MOESCP";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (name, t) in ckpt.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in ckpt.named_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn inconsistent(tensor: impl Into<String>, reason: impl Into<String>) -> Error {
    CheckpointError::Inconsistent {
        tensor: tensor.into(),
        reason: reason.into(),
    }
    .into()
}

/// Parses bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated {
            context: format!("{} bytes, magic needs 8", bytes.len()),
        }
        .into());
    }
    let magic = &bytes[..8];
    if magic != MAGIC {
        if &magic[..6] == MAGIC_FAMILY {
            return Err(CheckpointError::VersionMismatch {
                found: String::from_utf8_lossy(&magic[6..]).into_owned(),
            }
            .into());
        }
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        }
        .into());
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            context: "header length field".into(),
        }
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if header_len > body.len() as u64 {
        return Err(CheckpointError::Truncated {
            context: format!(
                "header declares {header_len} bytes, {} available",
                body.len()
            ),
        }
        .into());
    }
    let header_len = header_len as usize;
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| inconsistent("config", e.to_string()))?;

    let expected = Checkpoint::<f32>::expected_layout(&header.config);
    for (i, (name, shape)) in expected.iter().enumerate() {
        let Some(entry) = header.tensors.get(i) else {
            return Err(inconsistent(
                name.clone(),
                format!(
                    "missing from directory: config implies {} tensors, header lists {}",
                    expected.len(),
                    header.tensors.len()
                ),
            ));
        };
        if &entry.name != name {
            return Err(inconsistent(
                name.clone(),
                format!("directory entry {i} is {:?}", entry.name),
            ));
        }
        if &entry.shape != shape {
            return Err(inconsistent(
                name.clone(),
                format!("shape {:?} but config implies {:?}", entry.shape, shape),
            ));
        }
    }
    if let Some(extra) = header.tensors.get(expected.len()) {
        return Err(inconsistent(
            extra.name.clone(),
            format!(
                "not implied by config: config implies {} tensors, header lists {}",
                expected.len(),
                header.tensors.len()
            ),
        ));
    }

    let blob = &body[header_len..];
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(expected.len());
    for entry in &header.tensors {
        if entry.offset != offset {
            return Err(inconsistent(
                entry.name.clone(),
                format!(
                    "offset {} but directory order implies {offset}",
                    entry.offset
                ),
            ));
        }
        let count: usize = entry.shape.iter().product();
        let start = offset as usize;
        let end = start + 4 * count;
        if end > blob.len() {
            return Err(CheckpointError::Truncated {
                context: format!(
                    "tensor {:?} needs bytes {start}..{end}, blob has {}",
                    entry.name,
                    blob.len()
                ),
            }
            .into());
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(
            Tensor::new(entry.shape.clone(), data)
                .map_err(|e| inconsistent(entry.name.clone(), e.to_string()))?,
        );
        offset = end as u64;
    }
    if (offset as usize) != blob.len() {
        return Err(inconsistent(
            "<blob>",
            format!(
                "{} trailing bytes after last tensor",
                blob.len() - offset as usize
            ),
        ));
    }
    Checkpoint::from_layout(header.config, tensors)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
