//! Checkpoint container.
//!
//! Layout: `FMLB1\n`, the manifest byte length as a decimal line, the UTF-8
//! JSON manifest, the arrays as little-endian f64 in manifest order, then the
//! 64-bit FNV-1a hash of the array section (little-endian).

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::optim::Moments;
use crate::schedule::{ScheduleConfig, ScheduleState};

use super::stages::StageConfig;
use super::TrainerConfig;

pub const MAGIC: &[u8] = b"FMLB1\n";
pub const VERSION: u32 = 1;

/// Everything besides arrays needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub stages: StageConfig,
    pub trainer: TrainerConfig,
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    /// Tokens consumed.
    pub tokens: u64,
    /// Index of the stage the next step belongs to.
    pub stage: usize,
    /// Sampler stream position; decimal because it is 128-bit.
    pub rng_word_pos: String,
    pub corpus_fingerprint: u64,
    pub schedule_state: ScheduleState,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: TrainMeta,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: TrainMeta,
    pub arrays: Vec<(String, Array)>,
}

const PARAM: &str = "param.";
const M: &str = "adam_m.";
const V: &str = "adam_v.";

impl Checkpoint {
    pub fn new(meta: TrainMeta, params: &Params, moments: &Moments) -> Self {
        let mut arrays = Vec::new();
        for (prefix, p) in [(PARAM, params), (M, &moments.m), (V, &moments.v)] {
            arrays.extend(p.tensors().into_iter().map(|(n, a)| (format!("{prefix}{n}"), a.clone())));
        }
        Self { meta, arrays }
    }

    fn group(&self, prefix: &str) -> Result<Params> {
        let named: HashMap<String, Array> = self
            .arrays
            .iter()
            .filter_map(|(n, a)| n.strip_prefix(prefix).map(|s| (s.to_string(), a.clone())))
            .collect();
        Params::from_named(self.meta.model.clone(), named)
    }

    pub fn params(&self) -> Result<Params> {
        self.group(PARAM)
    }

    pub fn moments(&self) -> Result<Moments> {
        Ok(Moments {
            m: self.group(M)?,
            v: self.group(V)?,
        })
    }
}

fn hash(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.arrays.len());
    for (name, a) in &ckpt.arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            dtype: "f64".into(),
            offset: body.len() as u64,
        });
        for v in a.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        meta: ckpt.meta.clone(),
        arrays: entries,
    })?;
    let mut out = Vec::with_capacity(body.len() + manifest.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{}\n", manifest.len()).as_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&body);
    out.extend_from_slice(&hash(&body).to_le_bytes());
    Ok(out)
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt("bad magic bytes"))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing manifest length"))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("bad manifest length"))?;
    let rest = &rest[nl + 1..];
    if rest.len() < len + 8 {
        return Err(corrupt("file truncated"));
    }
    let (manifest, rest) = rest.split_at(len);
    let value: serde_json::Value =
        serde_json::from_slice(manifest).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("manifest has no version"))?;
    if version != VERSION as u64 {
        return Err(Error::CheckpointVersion {
            found: version as u32,
            expected: VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    let (body, tail) = rest.split_at(rest.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if hash(body) != stored {
        return Err(corrupt("array section hash mismatch"));
    }
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    let mut expected_offset = 0usize;
    for e in manifest.arrays {
        if e.dtype != "f64" {
            return Err(corrupt(&format!("array {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        if start != expected_offset || end > body.len() {
            return Err(corrupt(&format!("array {} lies outside the array section", e.name)));
        }
        let data = body[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let a = Array::new(e.shape, data).map_err(|_| corrupt(&format!("array {} has a bad shape", e.name)))?;
        arrays.push((e.name, a));
        expected_offset = end;
    }
    if expected_offset != body.len() {
        return Err(corrupt("trailing bytes in array section"));
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        arrays,
    })
}
