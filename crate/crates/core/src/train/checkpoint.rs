//! Checkpoint container.
//!
//! ```text
//! "CKPT" | u32 version | u32 meta_len | meta (UTF-8 TOML) | u32 blob_count | blobs
//! blob = u32 name_len | name (UTF-8) | u32 ndim | ndim x u32 dims | f32 data
//! ```
//!
//! All integers and floats are little-endian. Blob names are prefixed by
//! their role: `param/`, `adam.m/`, `adam.v/`, `bn.mean/`, `bn.var/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn blob_map(&self) -> BTreeMap<&str, &Tensor> {
        self.blobs.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("missing CKPT magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("blob name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::CorruptCheckpoint(format!(
                    "blob `{name}` has {ndim} dims"
                )));
            }
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::CorruptCheckpoint("blob too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blobs.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
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
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "truncated at byte {} (wanted {n} more)",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
