//! Model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   "MSTF"
//! version    u32       currently 1
//! header_len u64       byte length of the JSON header
//! header     JSON      {version, config, stats, params: [{name, rows, cols}]}
//! data       f64 LE    every parameter, row-major, in header order
//! ```
//!
//! Files are written through a temp file and renamed, so a crash never
//! leaves a truncated checkpoint behind.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::network::{ModelConfig, Mstformer};
use crate::preprocess::NormStats;

pub const MAGIC: &[u8; 4] = b"MSTF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    stats: NormStats,
    params: Vec<ParamEntry>,
}

/// A loaded model with the statistics it was trained against.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stats: NormStats,
    pub net: Mstformer,
    pub params: ParamStore,
}

pub fn encode(cfg: &ModelConfig, stats: &NormStats, params: &ParamStore) -> Result<Vec<u8>> {
    let entries = params
        .names()
        .iter()
        .zip(params.values())
        .map(|(n, m)| ParamEntry { name: n.clone(), rows: m.nrows(), cols: m.ncols() })
        .collect();
    let header = Header { version: VERSION, config: cfg.clone(), stats: *stats, params: entries };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in params.values() {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing MSTF magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(bad("header runs past end of file"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
    let mut data = &body[hlen..];
    let expected: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    if data.len() != expected * 8 {
        return Err(bad(&format!("expected {} data bytes, found {}", expected * 8, data.len())));
    }
    let mut params = ParamStore::new();
    for p in &header.params {
        let n = p.rows * p.cols;
        let vals = data[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[n * 8..];
        let m = Array2::from_shape_vec((p.rows, p.cols), vals).map_err(|e| bad(&e.to_string()))?;
        params.add(p.name.clone(), m);
    }
    let net = Mstformer::attach(header.config.clone(), &params)?;
    Ok(Checkpoint { config: header.config, stats: header.stats, net, params })
}

pub fn save(path: &Path, cfg: &ModelConfig, stats: &NormStats, params: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(cfg, stats, params)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
