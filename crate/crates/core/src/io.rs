//! GDAC container: named `f32` tensors plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GDAC" | version: u32 | meta_len: u32 | meta: UTF-8 JSON | count: u32 |
//! count × ( name_len: u32 | name | dtype: u8 (0 = f32) | rank: u32 | dims: u32 × rank | payload )
//! ```
//!
//! Records are written in name order, and metadata goes through
//! `serde_json::Value`, whose maps are sorted, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::engine::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"GDAC";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a GDAC file (bad magic)")]
    BadMagic,
    #[error("unsupported GDAC version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    Dtype(u8),
    #[error("truncated GDAC data: {0}")]
    Truncated(&'static str),
    #[error("invalid metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("invalid UTF-8 in record name")]
    Name,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Container {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("Value always serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(IoError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(IoError::Version(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u32("record count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| IoError::Name)?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(IoError::Dtype(dtype));
            }
            let rank = r.u32("rank")? as usize;
            if rank > r.remaining() / 4 {
                return Err(IoError::Truncated("dims"));
            }
            let dims = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(IoError::Truncated("payload"))?;
            // size is checked against the input before allocating anything
            let nbytes = numel.checked_mul(4).ok_or(IoError::Truncated("payload"))?;
            let payload = r.take(nbytes, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(dims, data)?);
        }
        if r.remaining() != 0 {
            return Err(IoError::Truncated("trailing bytes"));
        }
        Ok(Container { metadata, tensors })
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], IoError> {
        if n > self.remaining() {
            return Err(IoError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, IoError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
