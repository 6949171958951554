//! Shared on-disk container for named tensors.
//!
//! Layout:
//!
//! ```text
//! BNCKPT\n                      magic, 7 bytes
//! u64 little-endian             manifest length in bytes
//! manifest                      JSON: version, stage, metadata, entries
//! payload                       little-endian f64, row-major, concatenated
//! ```
//!
//! Entries are sorted by name and their byte ranges tile the payload in
//! order, so the file is a pure function of its contents.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 7] = b"BNCKPT\n";
pub const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub stage: String,
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub stage: String,
    /// Config echo, seed and anything else a later stage needs to rebuild.
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>) -> Self {
        Checkpoint {
            stage: stage.into(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("metadata {key}={raw:?} does not parse")))
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        Manifest {
            version: VERSION.into(),
            stage: self.stage.clone(),
            metadata: self.metadata.clone(),
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let payload: usize = self.tensors.values().map(|t| 8 * t.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let mlen = u64::from_le_bytes(len) as usize;
        let start = MAGIC.len() + 8;
        let manifest_bytes = bytes
            .get(start..start + mlen)
            .ok_or_else(|| fmt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(manifest_bytes)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {}, expected {VERSION}",
                manifest.version
            )));
        }
        let payload = &bytes[start + mlen..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        let mut prev: Option<&str> = None;
        for e in &manifest.entries {
            if prev.is_some_and(|p| p >= e.name.as_str()) {
                return Err(fmt("manifest names not unique and sorted"));
            }
            prev = Some(&e.name);
            if e.dtype != "f64" {
                return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(Error::Format(format!("{}: offset {} overlaps or leaves a gap", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let lo = e.offset as usize;
            let hi = lo + 8 * n;
            let raw = payload
                .get(lo..hi)
                .ok_or_else(|| Error::Format(format!("{}: payload truncated", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Format(format!("{}: {err}", e.name)))?;
            tensors.insert(e.name.clone(), t);
            expected_offset = hi as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Format(format!(
                "payload is {} bytes, manifest covers {expected_offset}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            stage: manifest.stage,
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
