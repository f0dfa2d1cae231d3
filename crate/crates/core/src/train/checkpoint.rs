//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XSNG" | version u16 | entry count u32
//! per entry: name length u16 | name UTF-8 | dtype u8 | rank u8 | dims u64 × rank | offset u64
//! data: f64 arrays, offsets relative to the start of this section
//! meta length u64 | meta JSON
//! ```

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XSNG";
pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

/// Named tensors plus a JSON metadata blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamSet,
    pub meta: Value,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in ckpt.tensors.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("tensor name `{name}` is too long")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("`{name}` has too many dims")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(DTYPE_F64);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    for (_, t) in ckpt.tensors.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&ckpt.meta)?;
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} overflows")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic: not an XSNG checkpoint".into()));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("`{name}` has unknown dtype tag {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank).map(|_| r.usize("dims")).collect::<Result<Vec<_>>>()?;
        let offset = r.usize("offset")?;
        manifest.push((name, dims, offset));
    }
    let data_start = r.pos;
    let mut tensors = ParamSet::new();
    let mut expected = 0usize;
    for (name, dims, offset) in manifest {
        if offset != expected {
            return Err(Error::Format(format!("`{name}` has inconsistent offset {offset}")));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
        r.pos = data_start + offset;
        let raw = r.take(numel.checked_mul(8).unwrap_or(usize::MAX), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        expected = offset + 8 * numel;
        if tensors.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        tensors.insert(name, Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    r.pos = data_start + expected;
    let meta_len = r.usize("meta length")?;
    let meta_bytes = r.take(meta_len, "meta")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    let meta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format(format!("meta JSON: {e}")))?;
    Ok(Checkpoint { tensors, meta })
}

pub fn write_checkpoint_file(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
