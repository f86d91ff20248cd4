//! Binary checkpoints.
//!
//! Layout: `ASRCKPT1`, a version byte, the architecture descriptor as a u32
//! count followed by u32 fields, then length-prefixed little-endian binary32
//! arrays: theta_t, theta_pre, and per norm layer the running mean and
//! variance followed by the source mean and variance. Values are rounded to
//! binary32, so only models already on that grid survive a round trip
//! bit-exactly (trained and freshly initialized models are).

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelState, NormStats};

pub const MAGIC: &[u8; 8] = b"ASRCKPT1";
pub const VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, v: &[f64]) {
    put_u32(out, v.len() as u32);
    for &x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode(model: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let d = model.arch().descriptor();
    put_u32(&mut out, d.len() as u32);
    for v in d {
        put_u32(&mut out, v);
    }
    put_array(&mut out, model.theta());
    put_array(&mut out, model.theta_pre());
    for stats in [model.stats(), model.source_stats()] {
        for s in stats {
            put_array(&mut out, &s.mean);
            put_array(&mut out, &s.var);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn array(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        if n != expected {
            return Err(Error::Format(format!("checkpoint array has {n} values, expected {expected}")));
        }
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    if n > 1 << 16 {
        return Err(Error::Format("architecture descriptor too long".into()));
    }
    let d = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let arch = Architecture::from_descriptor(&d)?;
    let total = arch.param_count();
    let theta = r.array(total)?;
    let theta_pre = r.array(total)?;
    let widths: Vec<usize> = arch
        .hidden_widths
        .iter()
        .zip(&arch.norm_after_hidden)
        .filter(|(_, &n)| n)
        .map(|(&w, _)| w)
        .collect();
    let read_stats = |r: &mut Reader| -> Result<Vec<NormStats>> {
        widths
            .iter()
            .map(|&w| Ok(NormStats { mean: r.array(w)?, var: r.array(w)? }))
            .collect()
    };
    let stats = read_stats(&mut r)?;
    let source_stats = read_stats(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    ModelState::from_parts(arch, theta, theta_pre, stats, source_stats)
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}
