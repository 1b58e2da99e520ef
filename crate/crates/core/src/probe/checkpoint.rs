//! Checkpoints: a JSON descriptor plus a little-endian tensor file.
//!
//! Binary layout: magic `MSPROBE\0`, `u32` format version, `u32` tensor
//! count, then per tensor a `u64` length followed by that many `f64`
//! values. Tensors follow layer order; within a layer, dense layers store
//! `w` (column-major, `outputs × inputs`) then `b`, batch norm stores gamma,
//! beta, running mean, running variance, and standardization stores mean
//! then std.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Layer, LayerSpec, Mlp};
use super::{Head, ProbeModel, FEATURE_NAMES};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;
const MAGIC: &[u8; 8] = b"MSPROBE\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub format_version: u32,
    pub feature_version: u32,
    pub feature_names: Vec<String>,
    pub layers: Vec<LayerSpec>,
    pub trunk_len: usize,
    pub frozen: usize,
    pub head: Head,
    pub trunk_sha256: String,
}

/// Write `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(model: &ProbeModel, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let desc = Descriptor {
        format_version: CHECKPOINT_FORMAT,
        feature_version: model.feature_version,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        layers: model.mlp.specs(),
        trunk_len: model.trunk_len,
        frozen: model.mlp.frozen,
        head: model.head.clone(),
        trunk_sha256: model.trunk_hash(),
    };
    let json_path = stem.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&desc)?).map_err(|e| Error::io(&json_path, e))?;

    let tensors: Vec<&[f64]> = model.mlp.layers.iter().flat_map(Layer::tensors).collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let bin_path = stem.with_extension("bin");
    let mut f = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&bin_path, e))
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Corrupt("checkpoint truncated".into()));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<ProbeModel> {
    let stem = stem.as_ref();
    let json_path = stem.with_extension("json");
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let desc: Descriptor = serde_json::from_str(&text)?;
    if desc.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Unsupported(format!("checkpoint format {}", desc.format_version)));
    }
    if desc.trunk_len > desc.layers.len() || desc.frozen > desc.layers.len() {
        return Err(Error::Format("descriptor trunk/frozen exceed layer count".into()));
    }

    let bin_path = stem.with_extension("bin");
    let mut raw = Vec::new();
    std::fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&bin_path, e))?;
    let mut buf = raw.as_slice();
    if take(&mut buf, 8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT {
        return Err(Error::Unsupported(format!("checkpoint format {version}")));
    }
    let count = u32::from_le_bytes(take(&mut buf, 4)?.try_into().expect("4 bytes")) as usize;

    let mut layers: Vec<Layer> = desc.layers.iter().map(Layer::from_spec).collect();
    let expected: usize = layers.iter().map(|l| l.tensors().len()).sum();
    if count != expected {
        return Err(Error::Corrupt(format!("{count} tensors, descriptor implies {expected}")));
    }
    for layer in layers.iter_mut() {
        for t in layer.tensors_mut() {
            let len = u64::from_le_bytes(take(&mut buf, 8)?.try_into().expect("8 bytes")) as usize;
            if len != t.len() {
                return Err(Error::Corrupt(format!("tensor of {len} values, expected {}", t.len())));
            }
            for (x, chunk) in t.iter_mut().zip(take(&mut buf, 8 * len)?.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
    }
    if !buf.is_empty() {
        return Err(Error::Corrupt("trailing bytes after tensors".into()));
    }
    let mut mlp = Mlp::new(layers)?;
    mlp.frozen = desc.frozen;
    let model = ProbeModel {
        mlp,
        trunk_len: desc.trunk_len,
        head: desc.head,
        feature_version: desc.feature_version,
    };
    if model.trunk_hash() != desc.trunk_sha256 {
        return Err(Error::Corrupt("trunk hash does not match descriptor".into()));
    }
    Ok(model)
}
