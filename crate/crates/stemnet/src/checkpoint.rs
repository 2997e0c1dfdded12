//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BSUN" | u32 version | u64 header length | JSON header
//! then per tensor: u32 name length | name | u8 dtype | u32 rank | u64 extents… | raw data
//! ```
//!
//! Parameters come first in table order, then the momentum buffers of the
//! learnable tensors under `velocity/<name>` when present.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use stemnet_core::unet::{Checkpoint, Stage, UNetConfig, UNetParams};
use stemnet_core::Tensor;

pub const MAGIC: &[u8; 4] = b"BSUN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint: magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Config(#[from] stemnet_core::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    stage: Stage,
    epoch: usize,
    seed: u64,
    velocity: bool,
}

fn corrupt(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Corrupt(e.to_string())
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.write_u32::<LittleEndian>(name.len() as u32).expect("vec write");
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.write_u32::<LittleEndian>(t.rank() as u32).expect("vec write");
    for &e in t.shape() {
        out.write_u64::<LittleEndian>(e as u64).expect("vec write");
    }
    out.reserve(t.len() * 4);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        config: ck.params.config,
        stage: ck.stage,
        epoch: ck.epoch,
        seed: ck.seed,
        velocity: ck.velocity.is_some(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    out.extend_from_slice(&json);
    for t in ck.params.named_tensors() {
        write_tensor(&mut out, &t.name, t.tensor);
    }
    if let Some(v) = &ck.velocity {
        for t in v.named_tensors().into_iter().filter(|t| t.learnable) {
            write_tensor(&mut out, &format!("{VELOCITY_PREFIX}{}", t.name), t.tensor);
        }
    }
    out
}

fn read_tensor(r: &mut &[u8]) -> Result<(String, Tensor<f32>)> {
    let name_len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    if name_len > r.len() {
        return Err(corrupt("tensor name runs past the end of the file"));
    }
    let (name, rest) = r.split_at(name_len);
    let name = String::from_utf8(name.to_vec()).map_err(corrupt)?;
    *r = rest;
    let dtype = r.read_u8().map_err(corrupt)?;
    if dtype != DTYPE_F32 {
        return Err(corrupt(format!("tensor {name} has unknown dtype code {dtype}")));
    }
    let rank = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    if rank > 8 {
        return Err(corrupt(format!("tensor {name} claims rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LittleEndian>().map_err(corrupt)? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| corrupt("extent overflow"))?;
    if n.checked_mul(4).is_none_or(|b| b > r.len()) {
        return Err(corrupt(format!("tensor {name} is truncated")));
    }
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(corrupt)?;
    Ok((name, Tensor::from_vec(&shape, data).map_err(corrupt)?))
}

fn fill(params: &mut UNetParams<f32>, names: &[String], learnable: bool, prefix: &str, table: &mut BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let slots = if learnable { params.learnable_mut() } else { params.tensors_mut() };
    for (slot, name) in slots.into_iter().zip(names) {
        let key = format!("{prefix}{name}");
        let t = table.remove(&key).ok_or(CheckpointError::MissingTensor(key.clone()))?;
        if t.shape() != slot.shape() {
            return Err(corrupt(format!("tensor {key} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("file shorter than the magic"))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let found = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    if found != VERSION {
        return Err(CheckpointError::Version { found });
    }
    let len = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
    if len > r.len() {
        return Err(corrupt("header runs past the end of the file"));
    }
    let header: Header = serde_json::from_slice(&r[..len]).map_err(corrupt)?;
    r = &r[len..];

    let mut table = BTreeMap::new();
    while !r.is_empty() {
        let (name, t) = read_tensor(&mut r)?;
        if table.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("tensor {name} appears twice")));
        }
    }
    let mut params = UNetParams::<f32>::zeros(&header.config)?;
    let all: Vec<String> = params.named_tensors().into_iter().map(|t| t.name).collect();
    let learnable: Vec<String> = params.named_tensors().into_iter().filter(|t| t.learnable).map(|t| t.name).collect();
    fill(&mut params, &all, false, "", &mut table)?;
    let velocity = if header.velocity {
        let mut v = UNetParams::<f32>::zeros(&header.config)?;
        fill(&mut v, &learnable, true, VELOCITY_PREFIX, &mut table)?;
        Some(v)
    } else {
        None
    };
    if let Some(extra) = table.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { stage: header.stage, epoch: header.epoch, seed: header.seed, params, velocity })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}
