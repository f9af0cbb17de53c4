//! Tensor archives: a directory holding `manifest.json` and `weights.bin`.
//!
//! `weights.bin` is the little-endian `f32` data of every tensor,
//! concatenated in manifest order. The manifest records each tensor's name,
//! dtype, shape, byte offset/length, group and trainability, plus a config
//! echo. Directories are written to a temporary sibling and renamed into
//! place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::nn::ParamGroup;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT_NAME: &str = "samda-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
    pub group: Option<ParamGroup>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tag: Option<String>,
    pub config: Value,
    pub groups: BTreeMap<ParamGroup, bool>,
    pub total_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub group: Option<ParamGroup>,
    pub trainable: bool,
}

/// In-memory form of a checkpoint directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub tag: Option<String>,
    pub config: Value,
    pub groups: BTreeMap<ParamGroup, bool>,
    pub tensors: Vec<NamedTensor>,
    pub extra: Value,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn encode(&self) -> Result<(Manifest, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let numel: usize = t.shape.iter().product();
            if numel != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            let offset = blob.len() as u64;
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                nbytes: blob.len() as u64 - offset,
                group: t.group,
                trainable: t.trainable,
            });
        }
        let manifest = Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            tag: self.tag.clone(),
            config: self.config.clone(),
            groups: self.groups.clone(),
            total_bytes: blob.len() as u64,
            tensors: entries,
            extra: self.extra.clone(),
        };
        Ok((manifest, blob))
    }

    /// SHA-256 over the manifest text and weights blob.
    pub fn digest(&self) -> Result<String> {
        let (manifest, blob) = self.encode()?;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&manifest)?);
        h.update(&blob);
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn write_file_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(bytes).at(path)?;
    f.sync_all().at(path)?;
    Ok(())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.{suffix}-{}", std::process::id()))
}

/// Writes `archive` to `dir`, replacing any previous contents atomically.
pub fn write_archive(dir: &Path, archive: &Archive) -> Result<()> {
    let (manifest, blob) = archive.encode()?;
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(&tmp).at(&tmp)?;
    write_file_synced(&tmp.join(WEIGHTS_FILE), &blob)?;
    write_file_synced(
        &tmp.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    if dir.exists() {
        let old = sibling(dir, "old");
        fs::rename(dir, &old).at(dir)?;
        fs::rename(&tmp, dir).at(dir)?;
        fs::remove_dir_all(&old).at(&old)?;
    } else {
        fs::rename(&tmp, dir).at(dir)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let corrupt = |reason: String| Error::CorruptManifest {
        path: path.clone(),
        reason,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if manifest.format != FORMAT_NAME {
        return Err(corrupt(format!("unexpected format `{}`", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {}", manifest.version)));
    }
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(corrupt(format!("tensor `{}` has unsupported dtype `{}`", t.name, t.dtype)));
        }
    }
    Ok(manifest)
}

pub fn read_archive(dir: &Path) -> Result<Archive> {
    let manifest = read_manifest(dir)?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&weights_path).at(&weights_path)?;
    let actual = blob.len() as u64;
    if actual < manifest.total_bytes {
        return Err(Error::Truncated {
            path: weights_path,
            expected: manifest.total_bytes,
            actual,
        });
    }
    if actual > manifest.total_bytes {
        return Err(Error::SizeMismatch {
            path: weights_path,
            reason: format!(
                "blob holds {actual} bytes but the manifest declares {}",
                manifest.total_bytes
            ),
        });
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let numel: u64 = t.shape.iter().map(|&d| d as u64).product();
        if numel * 4 != t.nbytes {
            return Err(Error::SizeMismatch {
                path: dir.join(MANIFEST_FILE),
                reason: format!(
                    "tensor `{}` of shape {:?} needs {} bytes, manifest says {}",
                    t.name,
                    t.shape,
                    numel * 4,
                    t.nbytes
                ),
            });
        }
        let end = t.offset + t.nbytes;
        if end > actual {
            return Err(Error::Range {
                name: t.name.clone(),
                start: t.offset,
                end,
                len: actual,
            });
        }
        let data = blob[t.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data,
            group: t.group,
            trainable: t.trainable,
        });
    }
    Ok(Archive {
        tag: manifest.tag,
        config: manifest.config,
        groups: manifest.groups,
        tensors,
        extra: manifest.extra,
    })
}
