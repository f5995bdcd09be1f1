//! Single-file tensor checkpoints.
//!
//! Layout: the magic bytes `ULAB`, one format-version byte, a little-endian
//! `u64` header length, a UTF-8 JSON header, then raw little-endian tensor
//! payloads in header order. The header holds the checkpoint kind, free-form
//! metadata (model config, counts) and a tensor table of name, dtype, shape
//! and byte offset relative to the start of the payload section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, FisherEstimate, LoraAdapter};
use crate::error::{Result, UlabError};
use crate::model::{ModelConfig, ModelParams, Precision};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"ULAB";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapters,
    Fisher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: header plus tensors in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(UlabError::Format(msg.into()))
}

pub fn encode(kind: CheckpointKind, meta: serde_json::Value, tensors: &[(String, &Matrix)], precision: Precision) -> Result<Vec<u8>> {
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut table = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, m) in tensors {
        table.push(TensorEntry {
            name: name.clone(),
            dtype: precision.dtype().to_string(),
            shape: [m.rows(), m.cols()],
            offset: payload.len() as u64,
        });
        payload.reserve(m.len() * width);
        for &v in m.as_slice() {
            match precision {
                Precision::F32 => {
                    let f = v as f32;
                    if f as f64 != v && v.is_finite() {
                        return format_err(format!("`{name}` holds values not representable in f32"));
                    }
                    payload.extend_from_slice(&f.to_le_bytes());
                }
                Precision::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        kind,
        meta,
        tensors: table,
    })?;
    let mut out = Vec::with_capacity(13 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 13 || &bytes[..4] != MAGIC {
        return format_err("missing ULAB magic");
    }
    if bytes[4] != FORMAT_VERSION {
        return format_err(format!("unsupported format version {}", bytes[4]));
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let body = &bytes[13..];
    if hlen > body.len() {
        return format_err("truncated header");
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return format_err(format!("unknown dtype `{other}`")),
        };
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let end = start + n * width;
        if end > payload.len() {
            return format_err(format!("tensor `{}` runs past the end of the file", e.name));
        }
        let data = payload[start..end]
            .chunks_exact(width)
            .map(|c| match width {
                4 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                _ => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        let m = Matrix::from_vec(e.shape[0], e.shape[1], data)
            .map_err(|err| UlabError::Format(format!("tensor `{}`: {err}", e.name)))?;
        tensors.push((e.name.clone(), m));
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_kind(path: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
    let ck = decode(&fs::read(path)?)?;
    if ck.kind != kind {
        return format_err(format!("expected a {kind:?} checkpoint, found {:?}", ck.kind));
    }
    Ok(ck)
}

pub fn save_model(path: &Path, params: &ModelParams, precision: Precision) -> Result<()> {
    let tensors: Vec<_> = params.tensors().iter().map(|(n, m)| (n.clone(), m)).collect();
    let meta = serde_json::json!({ "config": params.config, "precision": precision });
    write_file(path, &encode(CheckpointKind::Model, meta, &tensors, precision)?)
}

pub fn load_model(path: &Path) -> Result<(ModelParams, Precision)> {
    let ck = read_kind(path, CheckpointKind::Model)?;
    let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())?;
    let precision: Precision = serde_json::from_value(ck.meta["precision"].clone()).unwrap_or_default();
    let params = ModelParams::from_tensors(config, ck.tensors.into_iter().collect())?;
    Ok((params, precision))
}

pub fn save_adapters(path: &Path, adapters: &AdapterSet, precision: Precision) -> Result<()> {
    let mut tensors = Vec::new();
    for (name, ad) in adapters.iter() {
        tensors.push((format!("{name}.lora_a"), &ad.a));
        tensors.push((format!("{name}.lora_b"), &ad.b));
    }
    let meta = serde_json::json!({ "compensated": adapters.compensated() });
    write_file(path, &encode(CheckpointKind::Adapters, meta, &tensors, precision)?)
}

pub fn load_adapters(path: &Path) -> Result<AdapterSet> {
    let ck = read_kind(path, CheckpointKind::Adapters)?;
    let mut set = AdapterSet::new();
    let mut it = ck.tensors.into_iter();
    while let Some((a_name, a)) = it.next() {
        let (b_name, b) = it
            .next()
            .ok_or_else(|| UlabError::Format(format!("`{a_name}` has no matching B factor")))?;
        let target = a_name
            .strip_suffix(".lora_a")
            .filter(|t| b_name.strip_suffix(".lora_b") == Some(*t))
            .ok_or_else(|| UlabError::Format(format!("unexpected adapter tensors `{a_name}`, `{b_name}`")))?;
        set.insert(LoraAdapter {
            target_name: target.to_string(),
            a,
            b,
        })?;
    }
    let compensated: Vec<String> = serde_json::from_value(ck.meta["compensated"].clone()).unwrap_or_default();
    for c in compensated {
        set.mark_compensated(&c);
    }
    Ok(set)
}

pub fn save_fisher(path: &Path, f: &FisherEstimate) -> Result<()> {
    let tensors: Vec<_> = f.sums.iter().map(|(n, m)| (n.clone(), m)).collect();
    let meta = serde_json::json!({ "n_examples": f.n_examples });
    write_file(path, &encode(CheckpointKind::Fisher, meta, &tensors, Precision::F64)?)
}

pub fn load_fisher(path: &Path) -> Result<FisherEstimate> {
    let ck = read_kind(path, CheckpointKind::Fisher)?;
    let n_examples = ck.meta["n_examples"]
        .as_u64()
        .ok_or_else(|| UlabError::Format("fisher checkpoint lacks n_examples".into()))? as usize;
    Ok(FisherEstimate {
        sums: ck.tensors.into_iter().collect(),
        n_examples,
    })
}
