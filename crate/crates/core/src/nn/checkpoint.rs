use std::collections::BTreeMap;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PRSDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Tagged group of named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub meta: Value,
    tensors: Vec<(String, Tensor)>,
}

impl Section {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor `{name}` missing")))
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SectionEntry {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    sections: BTreeMap<String, SectionEntry>,
}

/// Versioned binary container: magic, version, JSON header length, JSON
/// header, then every tensor as little-endian f64 in header order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    sections: BTreeMap<String, Section>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: impl Into<String>, section: Section) {
        self.sections.insert(tag.into(), section);
    }

    pub fn get(&self, tag: &str) -> Option<&Section> {
        self.sections.get(tag)
    }

    pub fn section(&self, tag: &str) -> Result<&Section> {
        self.get(tag)
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{tag}` section")))
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            sections: self
                .sections
                .iter()
                .map(|(tag, s)| {
                    let entry = SectionEntry {
                        meta: s.meta.clone(),
                        tensors: s
                            .tensors
                            .iter()
                            .map(|(name, t)| TensorEntry {
                                name: name.clone(),
                                shape: t.shape().to_vec(),
                            })
                            .collect(),
                    };
                    (tag.clone(), entry)
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in self.sections.values() {
            for (_, t) in &s.tensors {
                for v in t.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut pos = 20 + len;
        let mut sections = BTreeMap::new();
        for (tag, entry) in header.sections {
            let mut section = Section::new(entry.meta);
            for t in entry.tensors {
                let n: usize = t.shape.iter().product();
                let raw = bytes
                    .get(pos..pos + 8 * n)
                    .ok_or_else(|| bad("truncated tensor data"))?;
                pos += 8 * n;
                let values = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let tensor = Tensor::from_shape_vec(IxDyn(&t.shape), values)
                    .map_err(|_| bad("tensor shape mismatch"))?;
                section.push(t.name, tensor);
            }
            sections.insert(tag, section);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { sections })
    }

    /// Writes through a temporary file and rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
