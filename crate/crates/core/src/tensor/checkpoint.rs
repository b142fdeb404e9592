//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SVSMCKPT" | version u32 | element bytes u32 | tensor count u32
//! per tensor: name len u32 | name utf-8 | rank u32 | dims u32 * rank | payload offset u64
//! payload: raw little-endian floats, offsets relative to payload start
//! ```

use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVSMCKPT";
const VERSION: u32 = 1;

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.numel() * T::BYTES) as u64;
        }
        for (_, t) in &self.tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint, converting the stored precision to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let elem = r.u32()? as usize;
        if elem != 4 && elem != 8 {
            return Err(r.err(format!("unsupported element width {elem}")));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("tensor name is not utf-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let payload = r.pos;
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape, offset) in manifest {
            let numel: usize = shape.iter().product();
            let start = payload + offset;
            let end = start + numel * elem;
            if end > bytes.len() {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    message: format!("payload of {name} truncated"),
                });
            }
            let data = bytes[start..end]
                .chunks_exact(elem)
                .map(|c| match elem {
                    4 => T::of(f32::read_le(c) as f64),
                    _ => T::of(f64::read_le(c)),
                })
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
                offset: start as u64,
                message: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
