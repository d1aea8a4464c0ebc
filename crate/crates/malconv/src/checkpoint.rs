//! Model checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u64 metadata length, JSON
//! metadata (model config, optimizer config, tensor directory), raw f32
//! little-endian tensor payload, u32 CRC32 of that payload. Saving and
//! reloading reproduces every tensor byte for byte.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MCVCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimMeta {
    cfg: AdamWConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    optim: Option<OptimMeta>,
    tensors: Vec<TensorEntry>,
}

fn collect_tensors(model: &mut Model, opt: Option<&AdamW>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| {
        out.push((p.name.to_string(), p.value.shape().to_vec(), p.value.data().to_vec()));
    });
    if let Some(opt) = opt {
        for (name, m, v) in &opt.moments {
            out.push((format!("optim.m.{name}"), m.shape().to_vec(), m.data().to_vec()));
            out.push((format!("optim.v.{name}"), v.shape().to_vec(), v.data().to_vec()));
        }
    }
    out
}

/// Write `model` (and optionally optimizer state) to `path`.
pub fn save(path: &Path, model: &mut Model, opt: Option<&AdamW>) -> Result<()> {
    let tensors = collect_tensors(model, opt);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len() as u64;
    }
    let meta = Metadata {
        config: model.cfg.clone(),
        optim: opt.map(|o| OptimMeta {
            cfg: o.cfg,
            step: o.step,
        }),
        tensors: entries,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta_json).map_err(io)?;
    let mut crc = crc32fast::Hasher::new();
    for (_, _, data) in &tensors {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        crc.update(&bytes);
        w.write_all(&bytes).map_err(io)?;
    }
    w.write_all(&crc.finalize().to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

/// Read a checkpoint, returning the model and any saved optimizer state.
pub fn load(path: &Path) -> Result<(Model, Option<AdamW>)> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |msg: &str| Error::Integrity(format!("{}: {msg}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let payload_start = 20 + meta_len;
    if buf.len() < payload_start + 4 {
        return Err(bad("truncated metadata"));
    }
    let meta: Metadata = serde_json::from_slice(&buf[20..payload_start])?;
    let payload = &buf[payload_start..buf.len() - 4];
    let stored_crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored_crc {
        return Err(bad("payload checksum mismatch"));
    }
    let read_tensor = |entry: &TensorEntry| -> Result<Vec<f32>> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(bad(&format!("tensor {} outside payload", entry.name)));
        }
        Ok(payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };

    let mut model = Model::new(&meta.config, 0)?;
    let mut missing: Option<String> = None;
    let find = |name: &str| meta.tensors.iter().find(|e| e.name == name);
    let mut fill_err: Option<Error> = None;
    model.visit_params(&mut |p| {
        if missing.is_some() || fill_err.is_some() {
            return;
        }
        match find(p.name) {
            Some(entry) => {
                if entry.shape != p.value.shape() {
                    fill_err = Some(bad(&format!(
                        "tensor {} shape {:?} != expected {:?}",
                        p.name,
                        entry.shape,
                        p.value.shape()
                    )));
                    return;
                }
                match read_tensor(entry) {
                    Ok(data) => p.value.data_mut().copy_from_slice(&data),
                    Err(e) => fill_err = Some(e),
                }
            }
            None => missing = Some(p.name.to_string()),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if let Some(name) = missing {
        return Err(bad(&format!("missing tensor {name}")));
    }

    let opt = match &meta.optim {
        Some(om) => {
            let mut opt = AdamW::new(om.cfg);
            opt.step = om.step;
            let mut err: Option<Error> = None;
            model.visit_params(&mut |p| {
                if err.is_some() {
                    return;
                }
                let load_moment = |prefix: &str| -> Result<Tensor> {
                    let name = format!("{prefix}.{}", p.name);
                    let entry = find(&name).ok_or_else(|| bad(&format!("missing {name}")))?;
                    let mut t = Tensor::zeros(&entry.shape);
                    t.data_mut().copy_from_slice(&read_tensor(entry)?);
                    Ok(t)
                };
                match (load_moment("optim.m"), load_moment("optim.v")) {
                    (Ok(m), Ok(v)) => opt.moments.push((p.name.to_string(), m, v)),
                    (Err(e), _) | (_, Err(e)) => err = Some(e),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            Some(opt)
        }
        None => None,
    };
    Ok((model, opt))
}
