//! Weight blobs with JSON sidecars.
//!
//! The blob is an 8-byte magic, a little-endian `u64` value count and the
//! parameters followed by every normalization buffer's mean and variance as
//! little-endian `f32`. The sidecar at `<blob>.json` carries the architecture, role
//! and training metadata plus the blob digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{Network, NetworkHandle, Role};

const MAGIC: &[u8; 8] = b"DJKDW001";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Training context stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch_hash: String,
    pub role: Role,
    #[serde(flatten)]
    pub info: CheckpointInfo,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<String>,
    pub blob_sha256: String,
    pub arch: ArchSpec,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary file so a failed save leaves no partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode(net: &NetworkHandle) -> Vec<u8> {
    let values = net.params().iter().map(|p| p.data()).chain(
        net.buffers().iter().flat_map(|b| [b.mean.as_slice(), b.var.as_slice()]),
    );
    let count: usize = values.clone().map(<[f32]>::len).sum();
    let mut out = Vec::with_capacity(16 + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for chunk in values {
        for v in chunk {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Saves `net` to `blob` and its sidecar; returns the sidecar path.
pub fn save_checkpoint(net: &NetworkHandle, blob: &Path, info: CheckpointInfo) -> Result<PathBuf> {
    if let Some(dir) = blob.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode(net);
    let meta = CheckpointMeta {
        arch_hash: net.spec().hash(),
        role: net.role(),
        info,
        params: net
            .param_names()
            .iter()
            .zip(net.params())
            .map(|(name, p)| TensorEntry { name: name.clone(), shape: p.shape().to_vec() })
            .collect(),
        buffers: net.buffers().iter().map(|b| b.name.clone()).collect(),
        blob_sha256: hex_digest(&bytes),
        arch: net.spec().clone(),
    };
    let side = sidecar_path(blob);
    write_atomic(blob, &bytes)?;
    write_atomic(&side, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(side)
}

pub fn read_meta(blob: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(blob);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint, verifying the architecture hash, blob digest and every
/// tensor name and shape.
pub fn load_checkpoint(blob: &Path) -> Result<(NetworkHandle, CheckpointMeta)> {
    let meta = read_meta(blob)?;
    let invalid = |msg: String| Error::Validation(format!("checkpoint {}: {msg}", blob.display()));
    if meta.arch.hash() != meta.arch_hash {
        return Err(invalid("architecture hash does not match the stored spec".into()));
    }
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    if hex_digest(&bytes) != meta.blob_sha256 {
        return Err(invalid("weight blob digest mismatch".into()));
    }
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(invalid("not a weight blob".into()));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + 4 * count {
        return Err(invalid(format!("blob holds {} bytes for {count} values", bytes.len())));
    }
    let mut values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));

    let mut net: NetworkHandle = Network::new(meta.arch.clone(), meta.role, 0)?;
    let expected: Vec<TensorEntry> = net
        .param_names()
        .iter()
        .zip(net.params())
        .map(|(name, p)| TensorEntry { name: name.clone(), shape: p.shape().to_vec() })
        .collect();
    if expected != meta.params {
        return Err(invalid("parameter names or shapes differ from the architecture".into()));
    }
    let buffer_names: Vec<String> = net.buffers().iter().map(|b| b.name.clone()).collect();
    if buffer_names != meta.buffers {
        return Err(invalid("normalization buffers differ from the architecture".into()));
    }
    let total: usize = net.params().iter().map(|p| p.len()).sum::<usize>()
        + net.buffers().iter().map(|b| b.mean.len() + b.var.len()).sum::<usize>();
    if total != count {
        return Err(invalid(format!("spec needs {total} values, blob has {count}")));
    }
    for p in net.params_mut() {
        for (dst, v) in p.data_mut().iter_mut().zip(&mut values) {
            *dst = v;
        }
    }
    for b in net.buffers_mut() {
        for dst in b.mean.iter_mut().chain(b.var.iter_mut()) {
            *dst = values.next().expect("count checked");
        }
    }
    Ok((net, meta))
}
