//! Binary tensor container shared by model and prefix-cache files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic [4] | version u32 | header_len u64 | header (UTF-8 JSON) | payload
//! ```
//!
//! The header is a JSON object whose `tensors` entry maps each tensor name to
//! `{shape, dtype: "f32", offset, length}` with offsets relative to the start
//! of the payload. Any other header keys belong to the caller.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

/// Serializes tensors (written in name order) plus caller metadata.
pub fn to_bytes(magic: [u8; 4], meta: Map<String, Value>, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        let length = 4 * t.len() as u64;
        entries.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length,
            },
        );
        offset += length;
    }
    let mut header = meta;
    header.insert("tensors".into(), serde_json::to_value(&entries)?);
    let header = serde_json::to_vec(&Value::Object(header))?;

    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container, returning caller metadata and the tensors.
pub fn from_bytes(
    magic: [u8; 4],
    bytes: &[u8],
) -> Result<(Map<String, Value>, BTreeMap<String, Tensor>)> {
    let available = bytes.len() as u64;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            what: "preamble".into(),
            needed: 16,
            available,
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = 16u64.checked_add(header_len).ok_or(Error::Truncated {
        what: "header".into(),
        needed: u64::MAX,
        available,
    })?;
    if payload_start > available {
        return Err(Error::Truncated {
            what: "header".into(),
            needed: payload_start,
            available,
        });
    }
    let header: Value = serde_json::from_slice(&bytes[16..payload_start as usize])?;
    let Value::Object(mut header) = header else {
        return Err(Error::Inconsistent {
            name: "header".into(),
            reason: "not a JSON object".into(),
        });
    };
    let entries: BTreeMap<String, TensorEntry> = match header.remove("tensors") {
        Some(v) => serde_json::from_value(v)?,
        None => BTreeMap::new(),
    };
    let payload = &bytes[payload_start as usize..];
    let mut tensors = BTreeMap::new();
    for (name, e) in entries {
        if e.dtype != "f32" {
            return Err(Error::Inconsistent {
                name,
                reason: format!("unsupported dtype {}", e.dtype),
            });
        }
        let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(4)) != Some(e.length) {
            return Err(Error::Inconsistent {
                name,
                reason: format!("length {} does not match shape {:?}", e.length, e.shape),
            });
        }
        let end = e.offset.checked_add(e.length).unwrap_or(u64::MAX);
        if end > payload.len() as u64 {
            return Err(Error::Truncated {
                what: format!("tensor `{name}`"),
                needed: payload_start.saturating_add(end),
                available,
            });
        }
        let data: Vec<f32> = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Inconsistent {
            name: name.clone(),
            reason: err.to_string(),
        })?;
        tensors.insert(name, t);
    }
    Ok((header, tensors))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
