//! `PBW1` weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PBW1"
//! u32 tensor count
//! per tensor: u32 name length, name bytes (UTF-8), u32 rank, rank x u64 dims,
//!             u64 byte offset into the payload
//! payload: raw f32 values, tensors back to back in manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Params, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PBW1";

pub fn encode(params: &Params) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset: u64 = 0;
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Params> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(
                usize::try_from(c.u64()?)
                    .map_err(|_| Error::Format("dimension overflow".into()))?,
            );
        }
        let offset = c.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let payload = &bytes[c.pos..];
    let mut params = Params::new();
    for (name, shape, offset) in manifest {
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
        let end = offset
            .checked_add(numel * 4)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Format(format!("payload for `{name}` out of range")))?;
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

pub fn save(params: &Params, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Params> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
