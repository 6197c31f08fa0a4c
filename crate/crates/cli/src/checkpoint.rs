//! Checkpoint file: `OQATCKPT`, the manifest length as a little-endian u64,
//! the manifest as canonical JSON, then every tensor as little-endian f32.
//!
//! Tensor names are `param/<name>`, `step/<key>` and
//! `bn/<layer>/<preceding>/{mean,var}`. Each manifest entry carries the
//! SHA-256 of the tensor bytes, checked on load.

use std::path::Path;

use oqat_core::numerics::Tensor;
use oqat_core::space::{canonical_json, SearchSpace};
use oqat_core::supernet::{BnKey, QuantConfig, RunningStats, StepKey, Supernet};
use oqat_core::training::InheritanceRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"OQATCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// `fp`, the bit width or `w/a`.
    pub bits: String,
    pub quant: QuantConfig,
    pub space: SearchSpace,
    /// Present on checkpoints written by bit inheritance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inheritance: Option<InheritanceRecord>,
    pub tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn tensors(net: &Supernet) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for p in net.params() {
        out.push((format!("param/{}", p.name), p.tensor.shape().to_vec(), p.tensor.data().to_vec()));
    }
    for (k, t) in net.steps() {
        out.push((format!("step/{k}"), t.shape().to_vec(), t.data().to_vec()));
    }
    for (k, st) in net.bn_stats() {
        out.push((format!("bn/{}/{}/mean", k.layer, k.preceding), vec![st.mean.len()], st.mean.clone()));
        out.push((format!("bn/{}/{}/var", k.layer, k.preceding), vec![st.var.len()], st.var.clone()));
    }
    out
}

/// Serialized checkpoint bytes.
pub fn encode(net: &Supernet, inheritance: Option<&InheritanceRecord>) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, data) in tensors(net) {
        let start = blob.len();
        for v in &data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry { name, shape, offset: start as u64, sha256: sha256_hex(&blob[start..]) });
    }
    let manifest = Manifest {
        version: VERSION,
        bits: net.quant().label(),
        quant: net.quant().clone(),
        space: net.space().clone(),
        inheritance: inheritance.cloned(),
        tensors: entries,
    };
    let json = canonical_json(&manifest);
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&blob);
    out
}

/// Write through a temporary file so a failed run never leaves a partial
/// checkpoint behind.
pub fn save(path: &Path, net: &Supernet, inheritance: Option<&InheritanceRecord>) -> CliResult<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, encode(net, inheritance)).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub struct Loaded {
    pub net: Supernet,
    pub manifest: Manifest,
}

pub fn decode(bytes: &[u8], path: &Path) -> CliResult<Loaded> {
    let bad = |d: String| CliError::checkpoint(path, d);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad(format!("manifest length {len} exceeds file size")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(bad(format!("unsupported version {} (expected {VERSION})", manifest.version)));
    }
    let blob = &bytes[data_start..];

    let mut net = Supernet::new(manifest.space.clone(), manifest.quant.clone(), 0)?;
    let mut expected_offset = 0usize;
    let mut params_seen = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        if start != expected_offset || start + 4 * n > blob.len() {
            return Err(bad(format!("tensor `{}` at offset {start} is out of place", e.name)));
        }
        expected_offset = start + 4 * n;
        let raw = &blob[start..expected_offset];
        if sha256_hex(raw) != e.sha256 {
            return Err(bad(format!("checksum mismatch for tensor `{}`", e.name)));
        }
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let parts: Vec<&str> = e.name.splitn(2, '/').collect();
        match parts.as_slice() {
            ["param", name] => {
                let p = net
                    .params_mut()
                    .iter_mut()
                    .find(|p| p.name == *name)
                    .ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
                if p.tensor.shape() != e.shape.as_slice() {
                    return Err(bad(format!("parameter `{name}` has shape {:?}, expected {:?}", e.shape, p.tensor.shape())));
                }
                p.tensor.data_mut().copy_from_slice(&values);
                params_seen += 1;
            }
            ["step", key] => {
                let key: StepKey = key.parse()?;
                if key.qlayer >= net.quantized_layer_count() || n != 1 {
                    return Err(bad(format!("bad step tensor `{}`", e.name)));
                }
                net.steps_mut().insert(key, Tensor::new(e.shape.clone(), values)?);
            }
            ["bn", rest] => {
                let f: Vec<&str> = rest.split('/').collect();
                let parsed = match f.as_slice() {
                    [l, p, which @ ("mean" | "var")] => l.parse::<usize>().ok().zip(p.parse::<usize>().ok()).map(|(l, p)| (l, p, *which)),
                    _ => None,
                };
                let (layer, preceding, which) = parsed.ok_or_else(|| bad(format!("bad BatchNorm tensor name `{}`", e.name)))?;
                let width = net
                    .layers()
                    .get(layer)
                    .and_then(|l| l.bn)
                    .map(|(g, _)| net.params()[g].tensor.numel())
                    .ok_or_else(|| bad(format!("BatchNorm tensor `{}` names a layer without BatchNorm", e.name)))?;
                if n != width {
                    return Err(bad(format!("BatchNorm tensor `{}` has {n} channels, expected {width}", e.name)));
                }
                let st = net.bn_stats_mut().entry(BnKey { layer, preceding }).or_insert_with(|| RunningStats { mean: Vec::new(), var: Vec::new() });
                if which == "mean" {
                    st.mean = values;
                } else {
                    st.var = values;
                }
            }
            _ => return Err(bad(format!("unknown tensor `{}`", e.name))),
        }
    }
    if expected_offset != blob.len() {
        return Err(bad(format!("{} trailing bytes after the last tensor", blob.len() - expected_offset)));
    }
    if params_seen != net.params().len() {
        return Err(bad(format!("{} of {} parameters present", params_seen, net.params().len())));
    }
    if net.bn_stats().values().any(|s| s.mean.len() != s.var.len()) {
        return Err(bad("BatchNorm mean without matching variance".into()));
    }
    if let Some(r) = &manifest.inheritance {
        r.verify()?;
    }
    Ok(Loaded { net, manifest })
}

pub fn load(path: &Path) -> CliResult<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}
