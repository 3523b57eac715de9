//! Checkpoint files: a JSON manifest plus one raw little-endian blob.
//!
//! The manifest at `PATH` lists every tensor as `{group, name, shape, dtype,
//! offset}` (byte offset into the blob at `PATH.bin`). Tensors are written as
//! `f64le` so a save/load round trip is bit-exact; `f32le` blobs are accepted
//! on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AgentError, AgentNets, AgentSpec};
use crate::autodiff::{ParamGroup, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    spec: AgentSpec,
    config: serde_json::Value,
    blob: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: u32,
    pub nets: AgentNets,
    /// Echo of the training configuration.
    pub config: serde_json::Value,
}

fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> AgentError {
    AgentError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn new(nets: AgentNets, config: serde_json::Value) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            nets,
            config,
        }
    }

    /// All tensors in a fixed order (group order, then name).
    fn entries(&self) -> Vec<(&str, &str, &Tensor)> {
        self.nets
            .groups()
            .into_iter()
            .flat_map(|g| g.iter().map(move |(n, t)| (g.name(), n, t)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (group, name, t) in self.entries() {
            tensors.push(TensorEntry {
                group: group.into(),
                name: name.into(),
                shape: t.shape().to_vec(),
                dtype: "f64le".into(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bpath = blob_path(path);
        let manifest = Manifest {
            format_version: self.format_version,
            spec: self.nets.spec.clone(),
            config: self.config.clone(),
            blob: bpath.file_name().expect("blob file name").to_string_lossy().into_owned(),
            blob_sha256: hex(&Sha256::digest(&blob)),
            tensors,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| AgentError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        fs::write(&bpath, &blob).map_err(|source| AgentError::Io {
            path: bpath.display().to_string(),
            source,
        })?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|source| AgentError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(path, e.to_string()))?;
        if m.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ckpt_err(path, format!("unsupported format_version {}", m.format_version)));
        }
        let bpath = path.with_file_name(&m.blob);
        let blob = fs::read(&bpath).map_err(|source| AgentError::Io {
            path: bpath.display().to_string(),
            source,
        })?;
        if hex(&Sha256::digest(&blob)) != m.blob_sha256 {
            return Err(ckpt_err(path, "blob checksum mismatch"));
        }
        // Build empty groups with the learning rate echoed in the config.
        let lr = m.config.get("lr").and_then(|v| v.as_f64()).unwrap_or(1e-3);
        let mut groups: Vec<ParamGroup> = ["encoder", "dynamics", "policy", "idm"]
            .iter()
            .map(|n| ParamGroup::new(*n, lr))
            .collect::<Result<_, _>>()?;
        for e in &m.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f64le" => 8,
                "f32le" => 4,
                other => return Err(ckpt_err(path, format!("tensor {}: unknown dtype {other}", e.name))),
            };
            let bytes = blob
                .get(e.offset..e.offset + n * width)
                .ok_or_else(|| ckpt_err(path, format!("tensor {} exceeds blob", e.name)))?;
            let data: Vec<f64> = if width == 8 {
                bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()
            } else {
                bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect()
            };
            let group = groups
                .iter_mut()
                .find(|g| g.name() == e.group)
                .ok_or_else(|| ckpt_err(path, format!("unknown group {}", e.group)))?;
            group.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        let [encoder, dynamics, policy, idm]: [ParamGroup; 4] = groups.try_into().expect("four groups");
        let nets = AgentNets {
            spec: m.spec,
            encoder,
            dynamics,
            policy,
            idm,
        };
        let fresh = AgentNets::init(nets.spec.clone(), lr, 0)?;
        for (have, want) in nets.groups().iter().zip(fresh.groups()) {
            let a: Vec<_> = have.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
            let b: Vec<_> = want.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
            if a != b {
                return Err(ckpt_err(path, format!("group {} does not match the network layout", have.name())));
            }
        }
        Ok(Self {
            format_version: m.format_version,
            nets,
            config: m.config,
        })
    }

    /// Bytes of every parameter in every group, in save order.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.nets.groups().iter().flat_map(|g| g.param_bytes()).collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
