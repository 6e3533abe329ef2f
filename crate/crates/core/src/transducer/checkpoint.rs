//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes  "ANCHKPT\0"
//! version    u32 LE
//! header_len u32 LE, then header_len bytes of UTF-8 JSON
//! count      u32 LE
//! count x { name_len u32, name bytes, ndim u32, ndim x u32 dims,
//!           product(dims) x f32 LE values }
//! ```
//!
//! Tensors are written in name order, so identical parameters always give
//! identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"ANCHKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            kind: "checkpoint",
            detail,
        };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).ok_or_else(|| bad("truncated magic".into()))?;
        if magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32().ok_or_else(|| bad("truncated version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = r.u32().ok_or_else(|| bad("truncated header length".into()))? as usize;
        let header = r.take(hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: serde_json::Value = serde_json::from_slice(header)?;
        let count = r.u32().ok_or_else(|| bad("truncated tensor count".into()))?;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let trunc = || bad(format!("truncated tensor #{i}"));
            let nlen = r.u32().ok_or_else(trunc)? as usize;
            let name = String::from_utf8(r.take(nlen).ok_or_else(trunc)?.to_vec())
                .map_err(|_| bad(format!("tensor #{i} name is not UTF-8")))?;
            let ndim = r.u32().ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32().ok_or_else(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4).ok_or_else(trunc)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
