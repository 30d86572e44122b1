//! Checkpoint directories: `manifest.json` plus a `params.bin` blob of
//! little-endian `f32` values laid out back to back in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: RunConfig,
    pub step: u64,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(ckpt.params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    for (name, t) in ckpt.params.iter() {
        let offset = blob.len() as u64;
        for v in t.to_f32_lossy() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: ckpt.step,
        config: ckpt.config.clone(),
        tensors,
    };
    let mut f = std::fs::File::create(dir.join(BLOB_FILE))?;
    f.write_all(&blob)?;
    f.sync_all()?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Checks the manifest against a blob of `blob_len` bytes.
pub fn verify_manifest(m: &Manifest, blob_len: u64) -> Result<()> {
    if m.format_version != FORMAT_VERSION {
        return Err(integrity(format!("unsupported format version {}", m.format_version)));
    }
    let mut expected = 0u64;
    let mut seen = std::collections::HashSet::new();
    for e in &m.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(integrity(format!("duplicate tensor `{}`", e.name)));
        }
        if e.dtype != "f32" {
            return Err(integrity(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(integrity(format!("`{}` has invalid shape {:?}", e.name, e.shape)));
        }
        let want = e.shape.iter().product::<usize>() as u64 * 4;
        if e.byte_len != want {
            return Err(integrity(format!(
                "`{}` spans {} bytes but shape {:?} needs {want}",
                e.name, e.byte_len, e.shape
            )));
        }
        if e.byte_offset != expected {
            return Err(integrity(format!(
                "`{}` starts at byte {}, expected {expected}",
                e.name, e.byte_offset
            )));
        }
        expected += e.byte_len;
    }
    if expected != blob_len {
        return Err(integrity(format!("manifest covers {expected} bytes, blob has {blob_len}")));
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| integrity(format!("bad manifest: {e}")))?;
    manifest.config.validate()?;
    let blob = std::fs::read(dir.join(BLOB_FILE))?;
    verify_manifest(&manifest, blob.len() as u64)?;
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let bytes = &blob[e.byte_offset as usize..(e.byte_offset + e.byte_len) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        params,
        config: manifest.config,
        step: manifest.step,
    })
}

/// Prefix used for teacher tensors stored alongside the student.
pub const TEACHER_PREFIX: &str = "teacher.";

/// Student tensors as-is, teacher tensors under [`TEACHER_PREFIX`].
pub fn merge_teacher(student: &ParamStore, teacher: &ParamStore) -> ParamStore {
    let mut out = student.clone();
    for (name, t) in teacher.iter() {
        out.insert(&format!("{TEACHER_PREFIX}{name}"), t.clone());
    }
    out
}

/// Inverse of [`merge_teacher`]; the teacher part may be empty.
pub fn split_teacher(all: &ParamStore) -> (ParamStore, ParamStore) {
    let mut student = ParamStore::new();
    let mut teacher = ParamStore::new();
    for (name, t) in all.iter() {
        match name.strip_prefix(TEACHER_PREFIX) {
            Some(rest) => teacher.insert(rest, t.clone()),
            None => student.insert(name, t.clone()),
        }
    }
    (student, teacher)
}
