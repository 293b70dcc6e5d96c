//! Parameter checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes   "SIGVCKPT"
//! version    u32       1
//! count      u32       number of entries
//! entry*     count times:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   ndim     u32
//!   dims     ndim x u32
//!   values   prod(dims) x f32, row-major
//! ```
//!
//! Entries are written in store order: trainable parameters first, then buffers
//! (batch-norm running statistics).

use std::fs;
use std::path::Path;

use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SIGVCKPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let entries: Vec<_> = store.entries().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32().ok_or("truncated header")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32().ok_or("truncated entry")? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or("truncated name")?)
            .map_err(|e| e.to_string())?
            .to_string();
        let ndim = r.u32().ok_or("truncated entry")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or("truncated shape")?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4).ok_or_else(|| format!("truncated values for `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

/// Loads values into a store whose layout was built from the same configuration.
/// Every entry of the store must be present with the same shape.
pub fn load_into(store: &mut ParameterStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(&bytes).map_err(|detail| Error::Format { path: path.to_path_buf(), detail })?;
    let expected = store.entries().count();
    if entries.len() != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{} entries in file, model has {expected}",
            entries.len()
        )));
    }
    for (name, t) in entries {
        store.set_entry(&name, t)?;
    }
    Ok(())
}
