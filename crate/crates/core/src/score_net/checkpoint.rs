//! Versioned binary checkpoint format.
//!
//! ```text
//! magic "SPDNCKPT" | version u32 | data_dim u32 | conditions u32 | steps u32
//! | time_features u32 | activation u8 | n_hidden u32 | widths u32 * n_hidden
//! | output_clamp f64 | param_count u64 | params f64 * param_count
//! | sha256 of everything above (32 bytes)
//! ```
//!
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Activation, Architecture, ScoreModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPDNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ScoreModelParams,
    /// Step count `T` of the schedule the network was trained for.
    pub steps: usize,
}

pub fn encode(params: &ScoreModelParams, steps: usize) -> Vec<u8> {
    let arch = params.arch();
    let mut out = Vec::with_capacity(64 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [arch.data_dim, arch.conditions, steps, arch.time_features] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(arch.activation.tag());
    out.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
    for w in &arch.hidden {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    out.extend_from_slice(&arch.output_clamp.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Splits off and verifies the trailing SHA-256.
pub(crate) fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 32 {
        return Err(Error::format("truncated file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let actual: [u8; 32] = Sha256::digest(body).into();
    if actual.as_slice() != digest {
        return Err(Error::format("checksum mismatch"));
    }
    Ok(body)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let body = verified_body(bytes)?;
    let mut r = Reader::new(body);
    r.take(MAGIC.len())?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let data_dim = r.u32()? as usize;
    let conditions = r.u32()? as usize;
    let steps = r.u32()? as usize;
    let time_features = r.u32()? as usize;
    let activation = Activation::from_tag(r.u8()?).ok_or_else(|| Error::format("unknown activation"))?;
    let n_hidden = r.u32()? as usize;
    let hidden = (0..n_hidden).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let output_clamp = r.f64()?;
    let arch = Architecture { data_dim, conditions, time_features, hidden, activation, output_clamp };
    arch.validate().map_err(|e| Error::format(e.to_string()))?;
    let count = r.u64()? as usize;
    if count != arch.param_count() {
        return Err(Error::format(format!(
            "parameter count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::format("trailing bytes after parameters"));
    }
    let params = ScoreModelParams::from_flat(arch, values).map_err(|e| Error::format(e.to_string()))?;
    Ok(Checkpoint { params, steps })
}

pub fn save(path: &Path, params: &ScoreModelParams, steps: usize) -> Result<()> {
    fs::write(path, encode(params, steps))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
