//! Binary checkpoint format.
//!
//! ```text
//! "PGPT" | version u32 | meta_len u32 | meta (UTF-8 `key=value\n` lines, sorted)
//! | n_tensors u32 | per tensor: name_len u32, name, ndim u32, dims u32[], f32 data
//! | crc32 of everything above
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PGPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: ParamStore,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("invalid UTF-8"))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| corrupt(format!("{what} too large")))
}

impl Checkpoint {
    pub fn new(tensors: ParamStore, metadata: BTreeMap<String, String>) -> Self {
        Checkpoint { metadata, tensors }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(format!("metadata key `{key}` missing")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(format!(
                    "metadata entry `{k}` cannot be encoded as a key=value line"
                )));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::with_capacity(16 + meta.len() + self.tensors.numel() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&len_u32(name.len(), "name")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.ndim(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "extent")?.to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 4 + 4 + 4 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("CRC mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for line in r.string(meta_len)?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?.to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor too large"))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| corrupt("tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&dims, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
            tensors
                .insert(name, t)
                .map_err(|e| corrupt(e.to_string()))?;
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes before CRC"));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
