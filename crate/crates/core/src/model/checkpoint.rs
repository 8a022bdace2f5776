//! Binary checkpoint container.
//!
//! Layout: magic `CKDCKPT\0`, format version (u32 LE), header length (u32 LE),
//! a JSON header, then the parameters as little-endian `f32`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Model};
use crate::error::{CkdError, Result};

const MAGIC: &[u8; 8] = b"CKDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    vocab_size: usize,
    vocab_hash: String,
    frozen: bool,
    param_count: usize,
    meta: BTreeMap<String, String>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        arch: model.arch().clone(),
        vocab_size: model.vocab_size(),
        vocab_hash: model.vocab_hash().to_string(),
        frozen: model.is_frozen(),
        param_count: model.param_count(),
        meta: model.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CkdError::Format("truncated checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(CkdError::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CkdError::Schema { expected: FORMAT_VERSION, found: version });
    }
    let len = read_u32(&mut r)? as usize;
    if r.len() < len {
        return Err(CkdError::Format("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    r = &r[len..];
    if r.len() != 4 * header.param_count {
        return Err(CkdError::Format(format!(
            "expected {} parameter bytes, found {}",
            4 * header.param_count,
            r.len()
        )));
    }
    let params: Vec<f64> = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(CkdError::NonFinite("checkpoint holds non-finite parameters".into()));
    }
    Model::from_parts(header.arch, header.vocab_size, header.vocab_hash, params, header.frozen, header.meta)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| CkdError::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
