//! Named-tensor container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"MOEDCKPT"
//! header_len u64
//! header     header_len bytes of UTF-8 JSON
//! blobs      raw f64 values of every tensor, in header order
//! ```
//!
//! The JSON header carries `format_version`, a `dtype` tag (`"f64le"`),
//! free-form `meta` fields, and the `name`/`shape` of each tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MOEDCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    meta: Map<String, Value>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Map<String, Value>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    /// Copies every tensor of `other` whose name starts with `prefix`.
    pub fn extend_prefixed(&mut self, other: &Checkpoint, prefix: &str) -> Result<()> {
        for (n, t) in &other.tensors {
            if n.starts_with(prefix) {
                self.insert(n.clone(), t.clone())?;
            }
        }
        Ok(())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.meta.get(key)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta(key).and_then(Value::as_str).ok_or_else(|| Error::Format(format!("missing string field {key}")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta(key).and_then(Value::as_u64).ok_or_else(|| Error::Format(format!("missing integer field {key}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let blob_len: usize = self.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
        }
        if header.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
        }
        let mut pos = 16 + len;
        let mut ckpt = Checkpoint { meta: header.meta, tensors: Vec::new() };
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(pos..pos + n * 8)
                .ok_or_else(|| Error::Format(format!("truncated blob for {}", entry.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            pos += n * 8;
            ckpt.insert(entry.name, Tensor::new(entry.shape, data)?)?;
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
