//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LCDN" | version u32 = 1 | tensor count u64
//! per tensor: name len u32 | UTF-8 name | dtype u8 (0 = f32, 1 = f64)
//!             | rank u8 | dims u64 × rank | row-major payload
//! metadata:   pair count u32 | per pair: key len u32, key, value len u32, value
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{DType, Element, Shape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LCDN";
const VERSION: u32 = 1;

/// One stored tensor. Values are held as `f64`, which represents every
/// `f32` exactly, and written back in their declared dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub values: Vec<f64>,
}

impl StoredTensor {
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        StoredTensor {
            dtype: T::DTYPE,
            dims: t.shape().dims().iter().map(|&d| d as u64).collect(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// The 4-D shape this tensor maps onto. Lower ranks are placed so that
    /// a vector `(C)` becomes `(1, C, 1, 1)`.
    pub fn shape(&self) -> Result<Shape> {
        let d: Vec<usize> = self.dims.iter().map(|&v| v as usize).collect();
        Ok(match d.as_slice() {
            [] => Shape::scalar(),
            [c] => Shape::channels(*c),
            [a, b] => Shape::new(*a, *b, 1, 1),
            [c, h, w] => Shape::new(1, *c, *h, *w),
            [n, c, h, w] => Shape::new(*n, *c, *h, *w),
            _ => return Err(Error::Archive(format!("rank {} unsupported", d.len()))),
        })
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(self.shape()?, self.values.iter().map(|&v| T::from_f64(v)).collect())
    }
}

/// Ordered collection of named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: IndexMap<String, StoredTensor>,
    pub metadata: IndexMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), StoredTensor::from_tensor(t));
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut out, name);
            out.push(t.dtype as u8);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match t.dtype {
                DType::F32 => t.values.iter().for_each(|&v| (v as f32).write_le(&mut out)),
                DType::F64 => t.values.iter().for_each(|&v| v.write_le(&mut out)),
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name = r.string()?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(Error::Archive(format!("tensor `{name}`: unknown dtype {d}"))),
            };
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Archive(format!("tensor `{name}`: size overflow")))?
                as usize;
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let payload = r.take(numel.checked_mul(width).ok_or_else(|| Error::Archive("size overflow".into()))?)?;
            let values = match dtype {
                DType::F32 => payload.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
                DType::F64 => payload.chunks_exact(8).map(f64::read_le).collect(),
            };
            archive.tensors.insert(name, StoredTensor { dtype, dims, values });
        }
        let pairs = r.u32()?;
        for _ in 0..pairs {
            let k = r.string()?;
            let v = r.string()?;
            archive.metadata.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Archive(format!("truncated at byte {}", self.pos)))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Archive("invalid UTF-8 name".into()))
    }
}
