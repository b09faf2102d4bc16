//! Versioned weight container shared by the segmentation and translation
//! networks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"VTONCKPT" | u32 format version | u64 header length | header JSON | f64 data
//! ```
//!
//! The header names the model kind, carries the architecture spec and the
//! step counter, and lists every array (name, shape, group) in data order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"VTONCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub spec: serde_json::Value,
    pub step: u64,
    pub extra: serde_json::Value,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    spec: serde_json::Value,
    #[serde(default)]
    extra: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
}

impl Checkpoint {
    pub fn new(kind: &str, spec: serde_json::Value, step: u64, store: ParamStore) -> Self {
        Self { kind: kind.to_string(), spec, step, extra: serde_json::Value::Null, store }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut data: Vec<&Tensor> = Vec::new();
        for (name, t) in self.store.params() {
            arrays.push(ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), buffer: false });
            data.push(t);
        }
        for (name, t) in self.store.buffers() {
            arrays.push(ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), buffer: true });
            data.push(t);
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            step: self.step,
            spec: self.spec.clone(),
            extra: self.extra.clone(),
            arrays,
        })?;
        let total: usize = data.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + total * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in data {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container; `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::checkpoint(origin, detail);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut store = ParamStore::new();
        let mut offset = header_end;
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(bad(&format!("truncated data for `{}`", entry.name)));
            }
            let values = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset = end;
            let t = Tensor::new(entry.shape, values);
            if entry.buffer {
                store.insert_buffer(entry.name, t);
            } else {
                store.insert(entry.name, t);
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after data"));
        }
        Ok(Self { kind: header.kind, spec: header.spec, step: header.step, extra: header.extra, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the model kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::checkpoint(path, format!("expected a `{kind}` checkpoint, found `{}`", ck.kind)));
        }
        Ok(ck)
    }
}
