//! Versioned binary artifact container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header (kind, metadata, blob table), then the blobs as little-endian f64
//! in table order. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DPTHCUT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not an artifact file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("expected a {expected} artifact, found {found}")]
    Kind { expected: String, found: String },
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("artifact has no entry named {0}")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn corrupt(msg: impl Into<String>) -> ContainerError {
    ContainerError::Corrupt(msg.into())
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container {
            kind: kind.into(),
            meta: Value::Object(Default::default()),
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn meta_field(&self, name: &str) -> Result<&Value, ContainerError> {
        self.meta
            .get(name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let table: Vec<Value> = self
            .tensors
            .iter()
            .map(|(n, t)| serde_json::json!({ "name": n, "shape": t.shape() }))
            .collect();
        let header = serde_json::json!({
            "kind": self.kind,
            "meta": self.meta,
            "blobs": table,
        });
        let header = serde_json::to_vec(&header).expect("json values always serialize");
        let payload: usize = self.tensors.values().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses bytes and checks the artifact kind when `expected_kind` is set.
    pub fn from_bytes(bytes: &[u8], expected_kind: Option<&str>) -> Result<Self, ContainerError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(corrupt("truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Value =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
        let kind = header["kind"]
            .as_str()
            .ok_or_else(|| corrupt("header has no kind"))?
            .to_string();
        if let Some(exp) = expected_kind {
            if exp != kind {
                return Err(ContainerError::Kind {
                    expected: exp.to_string(),
                    found: kind,
                });
            }
        }
        let mut rest = &body[hlen..];
        let mut tensors = BTreeMap::new();
        let table = header["blobs"]
            .as_array()
            .ok_or_else(|| corrupt("header has no blob table"))?;
        for entry in table {
            let name = entry["name"]
                .as_str()
                .ok_or_else(|| corrupt("blob without name"))?;
            let shape: Vec<usize> = entry["shape"]
                .as_array()
                .ok_or_else(|| corrupt(format!("blob {name} without shape")))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| corrupt(format!("blob {name} has a bad shape")))?;
            let n: usize = shape.iter().product();
            if rest.len() < n * 8 {
                return Err(corrupt(format!("blob {name} truncated")));
            }
            let data = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[n * 8..];
            let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
            tensors.insert(name.to_string(), t);
        }
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Container {
            kind,
            meta: header["meta"].clone(),
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|source| ContainerError::Io {
                    path: dir.display().to_string(),
                    source,
                })?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, expected_kind: Option<&str>) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, expected_kind)
    }
}
