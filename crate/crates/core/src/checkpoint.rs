//! Binary checkpoints: magic bytes, a length-prefixed JSON header (model spec,
//! run configuration, iteration, dtype, parameter names and shapes) and the
//! raw little-endian parameter data in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::ModelSpec;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"OVSEGCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub iteration: u64,
    pub model: ModelSpec,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub run_config: serde_json::Value,
    /// Training vocabulary (class names), informational.
    pub train_classes: Vec<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub iteration: u64,
    pub model: ModelSpec,
    pub run_config: serde_json::Value,
    pub train_classes: Vec<String>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            dtype: T::DTYPE.into(),
            iteration: self.iteration,
            model: self.model.clone(),
            run_config: self.run_config.clone(),
            train_classes: self.train_classes.clone(),
            params: self.params.iter().map(|(n, t)| ParamEntry { name: n.into(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.params.numel() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint, converting stored values to `T` if needed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(&format!("unknown dtype `{other}`"))),
        };
        let mut offset = 16 + hlen;
        let mut params = ParamStore::new();
        for e in &header.params {
            let n = numel(&e.shape);
            let raw = bytes.get(offset..offset + n * width).ok_or_else(|| bad(&format!("truncated data for `{}`", e.name)))?;
            offset += n * width;
            let data: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| if width == 4 { T::from_f64_lossy(f32::read_le(c) as f64) } else { T::from_f64_lossy(f64::read_le(c)) })
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Checkpoint {
            iteration: header.iteration,
            model: header.model,
            run_config: header.run_config,
            train_classes: header.train_classes,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
