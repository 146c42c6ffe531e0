//! Checkpoint archive: a JSON header plus named, shaped numeric arrays.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "DGARCH01"
//! u32      header length, then that many bytes of UTF-8 JSON
//! u32      tensor count
//! per tensor:
//!   u32 name length, name bytes
//!   u8  dtype (0 = f32, 1 = f64)
//!   u32 rank, then rank x u64 dims
//!   raw element data in row-major order
//! ```
//!
//! Tensors are written in lexicographic name order, so equal contents give
//! byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"DGARCH01";

#[derive(Debug, Clone, PartialEq)]
enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    shape: Vec<usize>,
    data: Data,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub header: serde_json::Value,
    tensors: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new(header: impl Serialize) -> Result<Self> {
        Ok(Archive {
            header: serde_json::to_value(header)?,
            tensors: BTreeMap::new(),
        })
    }

    pub fn header_as<H: DeserializeOwned>(&self) -> Result<H> {
        Ok(serde_json::from_value(self.header.clone())?)
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, array: &ArrayD<T>) {
        let std = array.as_standard_layout();
        let flat = std.as_slice().unwrap();
        let data = if T::DTYPE == f32::DTYPE {
            Data::F32(flat.iter().map(|v| v.to_f32().unwrap()).collect())
        } else {
            Data::F64(flat.iter().map(|v| v.as_f64()).collect())
        };
        self.tensors.insert(
            name.into(),
            Entry {
                shape: array.shape().to_vec(),
                data,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>> {
        let entry = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let values: Vec<T> = match &entry.data {
            Data::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap()).collect(),
            Data::F64(v) => v.iter().map(|&x| T::from_f64(x).unwrap()).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, entry) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dtype = match entry.data {
                Data::F32(_) => 0u8,
                Data::F64(_) => 1u8,
            };
            out.push(dtype);
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &entry.data {
                Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
        }
        let hlen = cur.u32()? as usize;
        let header: serde_json::Value = serde_json::from_slice(cur.take(hlen)?)?;
        let count = cur.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = cur.take(1)?[0];
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => Data::F32(
                    cur.take(4 * n)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Data::F64(
                    cur.take(8 * n)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            tensors.insert(name, Entry { shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Archive { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
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
