//! "VTSR" tensor container: the on-disk format for weights and raw
//! latents.
//!
//! Layout (all integers little-endian):
//! magic `VTSR` (4 bytes), version `u16` = 1, tensor count `u16`, then per
//! tensor: name length `u16`, UTF-8 name, dtype `u8` (1 = f32), rank `u8`,
//! dims as `u32` each, raw little-endian f32 payload. Round trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VTSR";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

/// A named rank-n f32 tensor as stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<NamedTensor> {
        let name = name.into();
        let expect: usize = dims.iter().map(|&d| d as usize).product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "tensor '{}' has {} values but dims {:?} require {}",
                name,
                data.len(),
                dims,
                expect
            )));
        }
        Ok(NamedTensor { name, dims, data })
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    if tensors.len() > u16::MAX as usize {
        return Err(Error::Format(format!(
            "too many tensors for container: {}",
            tensors.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u16).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {}", t.name)));
        }
        if t.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "tensor '{}' rank {} exceeds container limit",
                t.name,
                t.dims.len()
            )));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "container truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?} (\"VTSR\")",
            magic, MAGIC
        )));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let count = r.u16("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!(
                "tensor '{name}' has unsupported dtype {dtype}"
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")?);
        }
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let payload = r.take(len * 4, &format!("payload of '{name}'"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

/// Writes via a temp file in the same directory and renames into place,
/// so a failed run never leaves a partial container behind.
pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    crate::imgio::write_atomic(path, &bytes)
}
