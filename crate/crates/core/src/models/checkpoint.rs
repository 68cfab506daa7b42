//! Flat parameter files with a JSON manifest.
//!
//! `<stem>.bin` layout, all integers little-endian:
//!
//! ```text
//! magic "SRSPARAM" | u32 count | count x { u32 name_len | name (utf-8) | u32 rank | rank x u64 dim | f32 values }
//! ```
//!
//! `<stem>.json` holds a [`CheckpointManifest`].

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Forecaster, ModelConfig, ModelError};
use crate::autodiff::Tensor;
use crate::patching::PatchGeometry;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "srs-checkpoint-v1";
const MAGIC: &[u8; 8] = b"SRSPARAM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: String,
    pub geometry: PatchGeometry,
    pub seed: u64,
    pub model: ModelConfig,
    pub params_file: String,
    pub params: Vec<ParamEntry>,
}

fn err(path: &Path, reason: impl ToString) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn write_checkpoint(
    stem: &Path,
    manifest: &CheckpointManifest,
    values: &[(String, Tensor<f32>)],
) -> Result<(), ModelError> {
    let (bin, json) = paths(stem);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for (name, t) in values {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(&bin)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| err(&bin, e))?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| err(&json, e))?;
    std::fs::write(&json, text).map_err(|e| err(&json, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Reads `<stem>.json` and `<stem>.bin`.
pub fn read_checkpoint(
    stem: &Path,
) -> Result<(CheckpointManifest, Vec<(String, Tensor<f32>)>), ModelError> {
    let (bin, json) = paths(stem);
    let text = std::fs::read_to_string(&json).map_err(|e| err(&json, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| err(&json, e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(err(
            &json,
            format!("unsupported format `{}`", manifest.format),
        ));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| err(&bin, e))?;
    let truncated = || err(&bin, "truncated parameter file");
    let mut c = Cursor {
        bytes: &bytes,
        at: 0,
    };
    if c.take(8) != Some(MAGIC.as_slice()) {
        return Err(err(&bin, "bad magic"));
    }
    let count = c.u32().ok_or_else(truncated)?;
    let mut values = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(truncated)?)
            .map_err(|e| err(&bin, e))?
            .to_string();
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        values.push((name, Tensor::new(shape, data).map_err(|e| err(&bin, e))?));
    }
    if c.at != bytes.len() {
        return Err(err(&bin, "trailing bytes"));
    }
    Ok((manifest, values))
}

impl<S: Scalar> Forecaster<S> {
    /// Saves parameters (as f32) and the manifest next to each other.
    pub fn save(&self, stem: &Path, config_hash: &str) -> Result<CheckpointManifest, ModelError> {
        let values: Vec<(String, Tensor<f32>)> = self
            .store()
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.cast::<f32>()))
            .collect();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash.to_string(),
            geometry: *self.geometry(),
            seed: self.seed(),
            model: self.config().clone(),
            params_file: stem
                .with_extension("bin")
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            params: values
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        write_checkpoint(stem, &manifest, &values)?;
        Ok(manifest)
    }

    /// Rebuilds the model described by the manifest and loads its values.
    pub fn load(stem: &Path) -> Result<(Self, CheckpointManifest), ModelError> {
        let (manifest, values) = read_checkpoint(stem)?;
        let mut model = Forecaster::new(manifest.model.clone(), manifest.seed)?;
        if values.len() != model.store().len() {
            return Err(err(
                stem,
                format!(
                    "{} tensors for a model with {}",
                    values.len(),
                    model.store().len()
                ),
            ));
        }
        for (name, t) in values {
            let id = model
                .store()
                .id(&name)
                .ok_or_else(|| err(stem, format!("unknown parameter `{name}`")))?;
            if model.store().value(id).shape() != t.shape() {
                return Err(err(
                    stem,
                    format!(
                        "shape of `{name}` is {:?}, expected {:?}",
                        t.shape(),
                        model.store().value(id).shape()
                    ),
                ));
            }
            let data: Vec<S> = t.cast::<S>().into_data();
            model.store_mut().set(id, &data)?;
        }
        Ok((model, manifest))
    }
}
