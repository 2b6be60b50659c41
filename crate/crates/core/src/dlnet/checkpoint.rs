//! Flat container of named tensors.
//!
//! Layout (little-endian): magic `DLCK`, version `u16`, element width `u8`
//! (4 or 8 bytes), metadata length `u32` and UTF-8 metadata, tensor count
//! `u32`, then per tensor: name length `u16`, name, rank `u8`, dims as `u32`,
//! elements.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Free-form metadata, JSON by convention.
    pub meta: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    /// Appends every parameter of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `store` from the entries under `prefix`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{key}`")))?;
            store
                .set(id, t.clone())
                .map_err(|_| Error::Data(format!("checkpoint tensor `{key}` has shape {:?}", t.shape())))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&len_u32(self.meta.len())?.to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| Error::Data(format!("name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.ndim()).map_err(|_| Error::Data("rank above 255".into()))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint written with either element width, converting to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let width = r.take(1)?[0];
        if width != 4 && width != 8 {
            return Err(Error::Data(format!("unknown element width {width}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| Error::Data("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(width as usize).ok_or_else(|| Error::Data("tensor too large".into()))?)?;
            let data = if width == 4 {
                raw.chunks_exact(4)
                    .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap_or([0; 8]))))
                    .collect()
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("wanted {n} bytes at offset {}", self.pos))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
