//! `VRELW001` weight containers.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        8 bytes  "VRELW001"
//! header_len   u64
//! header       header_len bytes of JSON: { name: { "shape": [..], "offset": n, "nbytes": n } }
//! payload      concatenated f32 data; offsets are relative to the payload start
//! ```
//!
//! An optional `"dtype"` field per entry must name 32-bit floats.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 8] = b"VRELW001";

/// Named tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightContainer {
    entries: BTreeMap<String, Tensor>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Container(format!("duplicate tensor name `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Serializes to the `VRELW001` layout, payload packed in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            let nbytes = 4 * t.numel() as u64;
            header.insert(
                name.as_str(),
                EntryHeader {
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes,
                    dtype: Some("f32".into()),
                },
            );
            offset += nbytes;
        }
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        read_weight_container(&bytes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryHeader {
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
}

/// Header entries in document order, duplicates preserved so they can be
/// rejected.
struct HeaderEntries(Vec<(String, EntryHeader)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from tensor name to {shape, offset, nbytes}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((name, entry)) = map.next_entry::<String, EntryHeader>()? {
                    entries.push((name, entry));
                }
                Ok(HeaderEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn container_err(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

/// Parses a `VRELW001` container. Either every entry is materialized or an
/// error is returned.
pub fn read_weight_container(bytes: &[u8]) -> Result<WeightContainer> {
    if bytes.len() < 8 || &bytes[..8] != WEIGHT_MAGIC {
        return Err(container_err("bad magic, expected \"VRELW001\""));
    }
    if bytes.len() < 16 {
        return Err(container_err("truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[16..];
    if header_len > rest.len() as u64 {
        return Err(container_err(format!(
            "header length {header_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let (header, payload) = rest.split_at(header_len as usize);
    let HeaderEntries(entries) = serde_json::from_slice(header)
        .map_err(|e| container_err(format!("malformed header: {e}")))?;

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    let mut container = WeightContainer::new();
    for (name, entry) in &entries {
        if let Some(dtype) = &entry.dtype {
            if !matches!(dtype.as_str(), "f32" | "F32" | "float32") {
                return Err(container_err(format!(
                    "tensor `{name}` has dtype {dtype}, only f32 is supported"
                )));
            }
        }
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(container_err(format!(
                "tensor `{name}` has invalid shape {:?}",
                entry.shape
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &e| acc.checked_mul(e as u64))
            .ok_or_else(|| container_err(format!("tensor `{name}` shape overflows")))?;
        if entry.nbytes != 4 * numel {
            return Err(container_err(format!(
                "tensor `{name}` declares {} bytes, shape {:?} needs {}",
                entry.nbytes,
                entry.shape,
                4 * numel
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.nbytes)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                container_err(format!(
                    "tensor `{name}` spans beyond the payload ({} bytes): truncated",
                    payload.len()
                ))
            })?;
        spans.push((entry.offset, end, name));

        let data = payload[entry.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        container.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }

    spans.sort();
    for pair in spans.windows(2) {
        let (_, prev_end, prev) = pair[0];
        let (start, _, next) = pair[1];
        if start < prev_end {
            return Err(container_err(format!(
                "tensors `{prev}` and `{next}` overlap"
            )));
        }
    }
    Ok(container)
}
