//! Binary tensor container shared by checkpoints and datasets.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then every tensor's data as little-endian `f32`. Header offsets
//! are byte offsets into the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DenseArray;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FMQCKPT1";
pub const DATASET_MAGIC: &[u8; 8] = b"FMQDATA1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    #[serde(default)]
    metadata: Value,
}

/// Ordered collection of named `f32` tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorPack {
    pub metadata: Value,
    tensors: Vec<(String, DenseArray<f32>)>,
}

impl Default for TensorPack {
    fn default() -> Self {
        Self {
            metadata: Value::Object(Default::default()),
            tensors: Vec::new(),
        }
    }
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

impl TensorPack {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseArray<f32>) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.tensors.push((name, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray<f32>> {
        match self.tensors.iter().find(|(n, _)| n == name) {
            Some((_, t)) => Ok(t),
            None => format_err(format!("missing tensor '{name}'")),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray<f32>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(magic);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != magic {
            return format_err(format!(
                "bad magic: expected {}",
                String::from_utf8_lossy(magic)
            ));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let Some(header_bytes) = bytes.get(16..16 + hlen) else {
            return format_err("truncated header");
        };
        let header: Header = serde_json::from_slice(header_bytes)?;
        let data = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let Some(raw) = data.get(start..start + 4 * n) else {
                return format_err(format!("tensor '{}' runs past end of file", e.name));
            };
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, DenseArray::new(e.shape, values)?));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<()> {
        let bytes = self.to_bytes(magic)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, magic)
    }
}
