//! Checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! 8 bytes   magic "CTKDCKPT"
//! 8 bytes   header length h (u64)
//! h bytes   JSON header: { "format_version", "config", "tensors": [{name, offset, rows, cols}] }
//! ...       tensor blobs in ValueGrid binary layout; offsets are relative to the end of the header
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ValueGrid;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTKDCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub rows: u64,
    pub cols: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus an arbitrary JSON configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, ValueGrid)>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, grid: ValueGrid) {
        self.tensors.push((name.into(), grid));
    }

    pub fn get(&self, name: &str) -> Result<&ValueGrid> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, ValueGrid)> {
        self.tensors
            .iter()
            .filter_map(|(n, g)| n.strip_prefix(prefix).map(|s| (s.to_string(), g.clone())))
            .collect()
    }

    pub fn manifest(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, g)| {
                let e = TensorEntry {
                    name: name.clone(),
                    offset,
                    rows: g.rows() as u64,
                    cols: g.cols() as u64,
                };
                offset += g.binary_len() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: self.manifest(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, g) in &self.tensors {
            g.write_binary(&mut out).expect("Vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(&format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.format_version)));
        }
        let data = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset as usize;
            if start > data.len() {
                return Err(bad(&format!("tensor {} offset out of range", e.name)));
            }
            let g = ValueGrid::read_binary(&data[start..])?;
            if (g.rows() as u64, g.cols() as u64) != (e.rows, e.cols) {
                return Err(bad(&format!("tensor {} shape disagrees with manifest", e.name)));
            }
            tensors.push((e.name.clone(), g));
        }
        Ok(Self {
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
