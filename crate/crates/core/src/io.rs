//! Versioned container for named `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"HINTARR\0"
//! version      u32       FORMAT_VERSION
//! header_len   u64       byte length of the JSON header
//! header       JSON      {"kind": str, "meta": any, "arrays": [{"name": str, "shape": [usize]}]}
//! payload      f64 LE    each array's elements, row-major, in header order
//! ```
//!
//! Checkpoints (`kind = "checkpoint"`), PEFT sets (`kind = "peft"`) and task
//! contexts (`kind = "task-context"`) all use this container.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HintError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"HINTARR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| HintError::Data(format!("array {name} missing from {}", self.kind)))?;
        Ok(self.arrays.remove(pos).1)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(HintError::Version(format!(
                "expected a {kind} file, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, t) in &self.arrays {
            buf.clear();
            buf.reserve(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(HintError::Version("not a HINT array file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(HintError::Version(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let numel: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((entry.name, Tensor::new(&entry.shape, data)?));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
