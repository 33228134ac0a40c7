//! Single-file binary checkpoint.
//!
//! ```text
//! b"SAMPOCKP" | u32 version | u64 header_len | header JSON | f64 LE tensors | sha256
//! ```
//!
//! The header echoes the architecture (including adapter rank), the frozen
//! flag, each tensor's name and shape, and an arbitrary JSON config echo.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{ArchConfig, ModelParams, ParamId};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SAMPOCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    adapter_rank: Option<usize>,
    frozen: bool,
    tensors: Vec<TensorHeader>,
    config: serde_json::Value,
}

pub fn write_checkpoint(params: &ModelParams, config: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        arch: params.arch.clone(),
        adapter_rank: params.arch.adapter_rank,
        frozen: params.is_frozen(),
        tensors: params
            .named()
            .map(|(id, _)| TensorHeader {
                name: id.name().to_string(),
                shape: id.shape(&params.arch).expect("named tensors are present"),
            })
            .collect(),
        config: config.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(header.len() + 8 * params.total_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.named() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(format!("checkpoint: {}", msg.into()))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelParams, serde_json::Value)> {
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic or truncated file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|e| *e <= body.len())
        .ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    header.arch.validate()?;

    let mut tensors = vec![Vec::new(); ParamId::ALL.len()];
    let mut offset = header_end;
    for th in &header.tensors {
        let id = ParamId::from_name(&th.name)
            .ok_or_else(|| corrupt(format!("unknown tensor {}", th.name)))?;
        if id.shape(&header.arch).as_ref() != Some(&th.shape) {
            return Err(corrupt(format!("tensor {} has unexpected shape {:?}", th.name, th.shape)));
        }
        let n: usize = th.shape.iter().product();
        let end = offset + 8 * n;
        if end > body.len() {
            return Err(corrupt("tensor data truncated"));
        }
        tensors[id as usize] = body[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset = end;
    }
    if offset != body.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    for &id in ParamId::ALL {
        if id.shape(&header.arch).is_some() && tensors[id as usize].is_empty() {
            return Err(corrupt(format!("missing tensor {}", id.name())));
        }
    }
    Ok((
        ModelParams::from_parts(header.arch, tensors, header.frozen),
        header.config,
    ))
}

pub fn save_checkpoint(params: &ModelParams, config: &serde_json::Value, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, write_checkpoint(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
