//! Single-file parameter archives.
//!
//! Layout:
//!
//! ```text
//! b"HDRFCKPT"                      8-byte magic
//! u64 little-endian                manifest length in bytes
//! JSON manifest                    kind, step, seed, config, meta, tensor table
//! f32 little-endian blocks         tensors in manifest order, row-major
//! ```
//!
//! Each tensor-table entry records its group (for example `encoder`), its
//! parameter name, shape, and element offset into the data section.

use std::fs;
use std::path::Path;

use hdrfuse_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HDRFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub kind: String,
    pub step: u64,
    pub seed: u64,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

/// Parsed archive: manifest plus one parameter store per group, in file order.
#[derive(Clone, Debug)]
pub struct Archive {
    pub manifest: Manifest,
    pub groups: Vec<(String, ParamStore<f32>)>,
}

impl Archive {
    pub fn new(kind: &str, step: u64, seed: u64, config: Value, meta: Value) -> Self {
        Self {
            manifest: Manifest { format: FORMAT_VERSION, kind: kind.into(), step, seed, config, meta, tensors: Vec::new() },
            groups: Vec::new(),
        }
    }

    pub fn with_group(mut self, name: &str, store: &ParamStore<f32>) -> Self {
        self.groups.push((name.into(), store.clone()));
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.groups
            .iter()
            .find(|(g, _)| g == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Config(format!("checkpoint has no parameter group `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("expected a `{kind}` checkpoint, found `{}`", self.manifest.kind),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut manifest = self.manifest.clone();
        manifest.tensors.clear();
        let mut offset = 0;
        for (group, store) in &self.groups {
            for (_, name, t) in store.iter() {
                manifest.tensors.push(TensorEntry {
                    group: group.clone(),
                    name: name.into(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
            }
        }
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, store) in &self.groups {
            for (_, _, t) in store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format { path: path.into(), msg };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let data = &bytes[16 + len..];
        let mut groups: Vec<(String, ParamStore<f32>)> = Vec::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let block = data
                .get(e.offset * 4..(e.offset + n) * 4)
                .ok_or_else(|| bad(format!("tensor {}/{} out of bounds", e.group, e.name)))?;
            let vals = block.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if groups.last().is_none_or(|(g, _)| g != &e.group) {
                groups.push((e.group.clone(), ParamStore::new()));
            }
            groups.last_mut().unwrap().1.add(e.name.clone(), Tensor::from_vec(e.shape.clone(), vals));
        }
        Ok(Self { manifest, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Copy `src` into `dst`, requiring identical names, order and shapes.
pub fn load_into(dst: &mut ParamStore<f32>, src: &ParamStore<f32>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Shape(format!("checkpoint has {} tensors, architecture expects {}", src.len(), dst.len())));
    }
    for ((id, name, t), (_, sname, st)) in dst.clone().iter().zip(src.iter()) {
        if name != sname || t.shape() != st.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {sname} {:?} does not match architecture tensor {name} {:?}",
                st.shape(),
                t.shape()
            )));
        }
        dst.set(id, st.clone());
    }
    Ok(())
}
