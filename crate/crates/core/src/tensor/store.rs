//! Named-tensor container used for weight checkpoints.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic    8 bytes  "SIFCNWT\0"
//! version  u32      currently 1
//! meta_len u64      followed by meta_len bytes of UTF-8 metadata (JSON by convention)
//! count    u64      number of entries, each:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, ndim x u64 extents
//!   values   product(extents) x f64
//! ```
//!
//! Entries are written in lexicographic name order. Values are stored as
//! `f64`, so single-precision tensors round-trip exactly as well.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"SIFCNWT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed tensor store: {0}")]
    Format(String),
    #[error("unsupported tensor store version {0}")]
    Version(u32),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub metadata: String,
    entries: BTreeMap<String, Tensor<f64>>,
}

impl TensorStore {
    pub fn new(metadata: impl Into<String>) -> Self {
        TensorStore { metadata: metadata.into(), entries: BTreeMap::new() }
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.entries.insert(name.into(), tensor.cast());
    }

    pub fn get<T: Real>(&self, name: &str) -> Option<Tensor<T>> {
        self.entries.get(name).map(Tensor::cast)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u64).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, StoreError> {
        let fmt = |e: io::Error| StoreError::Format(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(StoreError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r).map_err(fmt)?;
        if version != VERSION {
            return Err(StoreError::Version(version));
        }
        let meta_len = read_u64(&mut r).map_err(fmt)? as usize;
        let metadata = String::from_utf8(read_bytes(&mut r, meta_len).map_err(fmt)?)
            .map_err(|e| StoreError::Format(format!("metadata: {e}")))?;
        let count = read_u64(&mut r).map_err(fmt)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r).map_err(fmt)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len).map_err(fmt)?)
                .map_err(|e| StoreError::Format(format!("entry name: {e}")))?;
            let ndim = read_u32(&mut r).map_err(fmt)? as usize;
            if ndim > 8 {
                return Err(StoreError::Format(format!("{name}: {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<io::Result<Vec<_>>>().map_err(fmt)?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(&mut r, n * 8).map_err(fmt)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| StoreError::Format(e.to_string()))?;
            entries.insert(name, t);
        }
        Ok(TensorStore { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let f = File::create(path).map_err(io_err(path))?;
        self.write_to(BufWriter::new(f)).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let f = File::open(path).map_err(io_err(path))?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> io::Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated"));
    }
    Ok(v)
}
