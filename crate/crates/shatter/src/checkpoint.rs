//! Versioned binary checkpoints: a JSON manifest (config, seed, step)
//! followed by named parameter blobs as 32-bit little-endian values.
//! Train-state checkpoints add the optimizer moments so a resumed run
//! continues bit-identically.

use crate::corpus::{push_u32, push_u64, Reader};
use crate::encoder::{EncoderParams, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::manifest::write_atomic;
use crate::optim::AdamState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8] = b"SHATCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
}

struct Blob {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn encode(manifest: &CheckpointManifest, blobs: &[Blob]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    let json =
        serde_json::to_vec(manifest).map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    push_u64(&mut buf, json.len() as u64);
    buf.extend_from_slice(&json);
    push_u64(&mut buf, blobs.len() as u64);
    for b in blobs {
        push_u32(&mut buf, b.name.len() as u32);
        buf.extend_from_slice(b.name.as_bytes());
        push_u32(&mut buf, b.shape.len() as u32);
        for &d in &b.shape {
            push_u64(&mut buf, d as u64);
        }
        for &v in &b.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn decode(raw: &[u8]) -> Result<(CheckpointManifest, Vec<Blob>)> {
    let mut r = Reader::new(raw);
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.u64()? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(r.bytes(json_len)?)
        .map_err(|e| Error::Data(format!("checkpoint manifest decode: {e}")))?;
    let count = r.u64()? as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| Error::Data("blob name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()?);
        }
        blobs.push(Blob { name, shape, data });
    }
    Ok((manifest, blobs))
}

fn param_blobs(params: &EncoderParams<f32>) -> Vec<Blob> {
    let mut blobs = Vec::new();
    params.visit(&mut |name, t, _| {
        blobs.push(Blob {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
    });
    blobs
}

fn restore_params(
    config: &ModelConfig,
    seed: u64,
    blobs: &[Blob],
    prefix: &str,
) -> Result<EncoderParams<f32>> {
    // Skeleton with the right field layout, then overwrite from blobs.
    let mut params = EncoderParams::<f32>::init(config, seed)?;
    let lookup: std::collections::HashMap<&str, &Blob> = blobs
        .iter()
        .filter_map(|b| b.name.strip_prefix(prefix).map(|n| (n, b)))
        .collect();
    let mut missing = Vec::new();
    let mut names = Vec::new();
    params.visit(&mut |name, _, _| names.push(name));
    let mut idx = 0usize;
    let mut failed: Option<Error> = None;
    params.visit_mut(&mut |t, _| {
        let name = &names[idx];
        idx += 1;
        match lookup.get(name.as_str()) {
            Some(blob) => {
                if blob.shape != t.shape() {
                    failed = Some(Error::Shape(format!(
                        "checkpoint blob {name} has shape {:?}, model wants {:?}",
                        blob.shape,
                        t.shape()
                    )));
                    return;
                }
                match Tensor::new(blob.shape.clone(), blob.data.clone()) {
                    Ok(nt) => *t = nt,
                    Err(e) => failed = Some(e),
                }
            }
            None => missing.push(name.clone()),
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint is missing parameters: {missing:?}"
        )));
    }
    Ok(params)
}

/// Model-only checkpoint (finetuning, extension).
pub fn save_model(path: &Path, model: &Model<f32>, seed: u64, step: u64) -> Result<()> {
    let manifest = CheckpointManifest {
        kind: "model".into(),
        config: model.config.clone(),
        seed,
        step,
    };
    let raw = encode(&manifest, &param_blobs(&model.params))?;
    write_atomic(path, &raw)
}

pub fn load_model(path: &Path) -> Result<(Model<f32>, CheckpointManifest)> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let (manifest, blobs) = decode(&raw)?;
    let params = restore_params(&manifest.config, manifest.seed, &blobs, "")?;
    let model = Model::from_parts(manifest.config.clone(), params)?;
    Ok((model, manifest))
}

/// Full training state: parameters plus Adam moments under `optim.m.` /
/// `optim.v.` prefixes.
pub fn save_train_state(
    path: &Path,
    model: &Model<f32>,
    adam: &AdamState<f32>,
    seed: u64,
) -> Result<()> {
    let manifest = CheckpointManifest {
        kind: "trainstate".into(),
        config: model.config.clone(),
        seed,
        step: adam.step,
    };
    let mut blobs = param_blobs(&model.params);
    let mut names = Vec::new();
    model.params.visit(&mut |name, _, _| names.push(name));
    for (i, name) in names.iter().enumerate() {
        blobs.push(Blob {
            name: format!("optim.m.{name}"),
            shape: adam.m[i].shape().to_vec(),
            data: adam.m[i].data().to_vec(),
        });
        blobs.push(Blob {
            name: format!("optim.v.{name}"),
            shape: adam.v[i].shape().to_vec(),
            data: adam.v[i].data().to_vec(),
        });
    }
    let raw = encode(&manifest, &blobs)?;
    write_atomic(path, &raw)
}

pub fn load_train_state(path: &Path) -> Result<(Model<f32>, AdamState<f32>, CheckpointManifest)> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let (manifest, blobs) = decode(&raw)?;
    if manifest.kind != "trainstate" {
        return Err(Error::Data(format!(
            "expected a trainstate checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let params = restore_params(&manifest.config, manifest.seed, &blobs, "")?;
    let model = Model::from_parts(manifest.config.clone(), params)?;
    let mut adam = AdamState::init(&model.params);
    adam.step = manifest.step;
    let lookup: std::collections::HashMap<&str, &Blob> =
        blobs.iter().map(|b| (b.name.as_str(), b)).collect();
    let mut names = Vec::new();
    model.params.visit(&mut |name, _, _| names.push(name));
    for (i, name) in names.iter().enumerate() {
        for (prefix, store) in [("optim.m.", &mut adam.m), ("optim.v.", &mut adam.v)] {
            let key = format!("{prefix}{name}");
            let blob = lookup
                .get(key.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint missing {key}")))?;
            store[i] = Tensor::new(blob.shape.clone(), blob.data.clone())?;
        }
    }
    Ok((model, adam, manifest))
}
