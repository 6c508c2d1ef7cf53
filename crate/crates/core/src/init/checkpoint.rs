//! Named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STSC"            4 bytes magic
//! version           u32 (= 1)
//! entry count       u32
//! per entry:
//!   name length     u32
//!   name            UTF-8 bytes
//!   dtype           u8 (1 = f32, 2 = f64)
//!   rank            u8
//!   dims            rank x u64
//!   data            product(dims) little-endian scalars
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"STSC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Stores `t` under its own dtype.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Converts to `T`, rounding when narrowing.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn bits_eq(&self, other: &AnyTensor) -> bool {
        match (self, other) {
            (AnyTensor::F32(a), AnyTensor::F32(b)) => a.bits_eq(b),
            (AnyTensor::F64(a), AnyTensor::F64(b)) => a.bits_eq(b),
            _ => false,
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Ordered map of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: IndexMap<String, AnyTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn format_version(&self) -> u32 {
        FORMAT_VERSION
    }

    /// Fails on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: impl Into<AnyTensor>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::format(format!("duplicate entry {name:?}")));
        }
        self.entries.insert(name, tensor.into());
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, tensor: impl Into<AnyTensor>) {
        self.entries.insert(name.into(), tensor.into());
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.get(name)
    }

    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(AnyTensor::to_tensor)
            .ok_or_else(|| Error::format(format!("missing entry {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Same names in the same order with bit-identical tensors.
    pub fn bits_eq(&self, other: &Checkpoint) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bits_eq(vb))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.len()).map_err(|_| Error::format("too many entries"))?.to_le_bytes());
        for (name, t) in &self.entries {
            let name_len = u32::try_from(name.len()).map_err(|_| Error::format("name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            let rank = u8::try_from(t.dims().len()).map_err(|_| Error::format("rank exceeds 255"))?;
            out.push(rank);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad magic, not an STSC checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("entry name is not UTF-8"))?
                .to_owned();
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::format(format!("unknown dtype code {code}")))?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|_| Error::format("dimension overflows usize"))?);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("element count overflows"))?;
            let nbytes = len
                .checked_mul(dtype.size_of())
                .ok_or_else(|| Error::format("byte count overflows"))?;
            let raw = r.take(nbytes)?;
            let tensor = match dtype {
                DType::F32 => AnyTensor::F32(decode(&dims, raw)?),
                DType::F64 => AnyTensor::F64(decode(&dims, raw)?),
            };
            ckpt.insert(name, tensor)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }
}

fn decode<T: Element>(dims: &[usize], raw: &[u8]) -> Result<Tensor<T>> {
    let data = raw.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
    Tensor::from_vec(dims, data).map_err(|e| Error::format(format!("bad tensor payload: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
