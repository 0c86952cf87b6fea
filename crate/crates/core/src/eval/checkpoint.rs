use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{Architecture, CapsNet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CKPT";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 10;
const RUNNING_MEAN: &str = "bn.running_mean";
const RUNNING_VAR: &str = "bn.running_var";

/// Training provenance stored with the parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// In `f32` elements from the start of the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    architecture: Architecture,
    tensors: Vec<Entry>,
    meta: CheckpointMeta,
}

/// SHA-256 hex digest of the JSON form of `config`.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// SHA-256 hex digest of every parameter and running statistic, bit for
/// bit.
pub fn parameter_digest(model: &CapsNet<f32>) -> String {
    let mut h = Sha256::new();
    for p in &model.params {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    if let Some((mean, var)) = model.bn.running() {
        for v in mean.iter().chain(var) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(model: &CapsNet<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors: Vec<(&str, &[usize], &[f32])> =
        model.params.iter().map(|p| (p.name.as_str(), p.value.shape(), p.value.data())).collect();
    let channels = [model.bn.channels];
    if let Some((mean, var)) = model.bn.running() {
        tensors.push((RUNNING_MEAN, &channels, mean));
        tensors.push((RUNNING_VAR, &channels, var));
    }
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in tensors {
        entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset += data.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        architecture: model.arch.clone(),
        tensors: entries,
        meta: meta.clone(),
    })?;
    let len = u32::try_from(manifest.len()).map_err(|_| Error::invalid("manifest too large"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(CapsNet<f32>, CheckpointMeta)> {
    let truncated = || Error::format(bytes.len() as u64, "checkpoint truncated");
    if bytes.len() < HEADER_LEN {
        return Err(truncated());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let manifest_end = HEADER_LEN.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(truncated)?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| Error::format(HEADER_LEN as u64, format!("bad manifest: {e}")))?;
    let payload = &bytes[manifest_end..];
    let at = |i: usize| manifest_end as u64 + 4 * i as u64;

    let mut model = CapsNet::<f32>::new(manifest.architecture, 0)?;
    let mut running = (None, None);
    let mut expected = 0;
    let mut seen = 0;
    for entry in &manifest.tensors {
        if entry.offset != expected {
            return Err(Error::format(at(entry.offset), format!("tensor {} out of order", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n;
        if 4 * end > payload.len() {
            return Err(truncated());
        }
        let data: Vec<f32> = payload[4 * entry.offset..4 * end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        expected = end;
        match entry.name.as_str() {
            RUNNING_MEAN => running.0 = Some(data),
            RUNNING_VAR => running.1 = Some(data),
            name => {
                let p = model
                    .params
                    .iter_mut()
                    .find(|p| p.name == name)
                    .ok_or_else(|| Error::format(at(entry.offset), format!("unknown tensor {name}")))?;
                if p.value.shape() != entry.shape.as_slice() {
                    return Err(Error::format(
                        at(entry.offset),
                        format!("tensor {name} has shape {:?}, architecture needs {:?}", entry.shape, p.value.shape()),
                    ));
                }
                p.value = Tensor::new(entry.shape.clone(), data)?;
                seen += 1;
            }
        }
    }
    if seen != model.params.len() {
        return Err(Error::format(manifest_end as u64, "checkpoint is missing parameters"));
    }
    if 4 * expected != payload.len() {
        return Err(Error::format(at(expected), "trailing bytes after payload"));
    }
    match running {
        (Some(m), Some(v)) => model.bn.set_running(m, v)?,
        (None, None) => {}
        _ => return Err(Error::format(manifest_end as u64, "incomplete running statistics")),
    }
    Ok((model, manifest.meta))
}

pub fn save_checkpoint(model: &CapsNet<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model, meta)?).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without any configuration check.
pub fn read_checkpoint(path: &Path) -> Result<(CapsNet<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}

/// Reads a checkpoint for use under a configuration hashing to
/// `config_hash`. A mismatch is logged and the model is still returned,
/// which is fine for inference but means a resumed run would diverge.
pub fn load_checkpoint(path: &Path, config_hash: &str) -> Result<(CapsNet<f32>, CheckpointMeta)> {
    let (model, meta) = read_checkpoint(path)?;
    if meta.config_hash != config_hash {
        log::warn!(
            "{}: trained under config {}, current config is {}",
            path.display(),
            meta.config_hash,
            config_hash
        );
    }
    Ok((model, meta))
}
