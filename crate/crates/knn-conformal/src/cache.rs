//! Optional on-disk neighbor cache.
//!
//! Exact search dominates the runtime of large runs, so per-query neighbor
//! lists can be persisted and reused. Files are keyed by the bundle's
//! content hash plus the list length `k`; a mismatch on either is treated
//! as a miss and the cache is rebuilt. The cache directory comes from the
//! `KNN_CONFORMAL_CACHE` environment variable; without it, nothing is
//! read or written.
//!
//! Layout (little-endian): magic `KCNC`, version u8, hash length u16 +
//! hash bytes, k u32, query count u64, then per query a u32 list length
//! followed by (row u32, distance f64) pairs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::index::Neighbor;

pub const CACHE_ENV_VAR: &str = "KNN_CONFORMAL_CACHE";

const MAGIC: &[u8; 4] = b"KCNC";
const VERSION: u8 = 1;

/// Cache directory from the environment, if configured.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV_VAR).map(PathBuf::from)
}

/// File path for one cached section (`section` names what was queried,
/// e.g. `train-top25` or `cal-all`).
pub fn cache_path(dir: &Path, bundle_hash: &str, section: &str) -> PathBuf {
    dir.join(format!("{bundle_hash}.{section}.knncache"))
}

pub fn save_neighbor_lists(
    path: &Path,
    bundle_hash: &str,
    k: usize,
    lists: &[Vec<Neighbor>],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let ioerr = |e| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(ioerr)?);
    w.write_all(MAGIC).map_err(ioerr)?;
    w.write_all(&[VERSION]).map_err(ioerr)?;
    let hash = bundle_hash.as_bytes();
    w.write_all(&(hash.len() as u16).to_le_bytes()).map_err(ioerr)?;
    w.write_all(hash).map_err(ioerr)?;
    w.write_all(&(k as u32).to_le_bytes()).map_err(ioerr)?;
    w.write_all(&(lists.len() as u64).to_le_bytes()).map_err(ioerr)?;
    for list in lists {
        w.write_all(&(list.len() as u32).to_le_bytes()).map_err(ioerr)?;
        for n in list {
            w.write_all(&(n.row as u32).to_le_bytes()).map_err(ioerr)?;
            w.write_all(&n.distance.to_le_bytes()).map_err(ioerr)?;
        }
    }
    w.flush().map_err(ioerr)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::InvalidData(format!(
                "{}: corrupt neighbor cache",
                self.path.display()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a cached section. Returns `Ok(None)` when the file is absent or
/// was written for a different bundle or `k`.
pub fn load_neighbor_lists(
    path: &Path,
    bundle_hash: &str,
    k: usize,
) -> Result<Option<Vec<Vec<Neighbor>>>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path.display().to_string(), e)),
    };
    let mut r = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC || r.take(1)?[0] != VERSION {
        return Ok(None);
    }
    let hash_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
    if r.take(hash_len)? != bundle_hash.as_bytes() {
        return Ok(None);
    }
    if r.u32()? as usize != k {
        return Ok(None);
    }
    let count = r.u64()? as usize;
    let mut lists = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            let row = r.u32()? as usize;
            let distance = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            list.push(Neighbor { row, distance });
        }
        lists.push(list);
    }
    Ok(Some(lists))
}
