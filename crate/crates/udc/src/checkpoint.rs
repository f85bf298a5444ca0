//! Flat key→tensor checkpoint container shared by all stages.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "UDCK" | version u32 | entry count u32
//! per entry: key len u16 | key utf8 | ndim u8 | dims u32 each | f64 data
//! trailer: sha256 of everything above
//! ```
//!
//! Entries are written in key order, the checksum covers the whole body, and
//! loading verifies sizes before allocating, so truncated, corrupted, or
//! hostile files fail cleanly instead of exhausting memory.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, UdcError};
use crate::numerics::{Parameter, Tensor};

const MAGIC: &[u8; 4] = b"UDCK";
const VERSION: u32 = 1;
const MAX_ENTRIES: usize = 1 << 20;
const MAX_KEY_LEN: usize = 4096;
const MAX_ELEMENTS: usize = 1 << 24;

fn chk<T>(path: &Path, r: std::result::Result<T, String>) -> Result<T> {
    r.map_err(|msg| UdcError::Checkpoint { path: path.display().to_string(), msg })
}

pub fn save_checkpoint(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (key, tensor) in entries {
        assert!(key.len() <= MAX_KEY_LEN, "checkpoint key too long: {}", key);
        body.extend_from_slice(&(key.len() as u16).to_le_bytes());
        body.extend_from_slice(key.as_bytes());
        body.push(2u8);
        body.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        body.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        for v in tensor.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &body).map_err(|e| UdcError::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| UdcError::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated: wanted {} bytes at offset {}", n, self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| UdcError::io(path.display().to_string(), e))?;
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return chk(path, Err("file too short to be a checkpoint".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return chk(path, Err("checksum mismatch: file is corrupted".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    let parse = (|| -> std::result::Result<BTreeMap<String, Tensor>, String> {
        if c.take(4)? != MAGIC {
            return Err("bad magic, not a checkpoint file".into());
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {}", version));
        }
        let count = c.u32()? as usize;
        if count > MAX_ENTRIES {
            return Err(format!("entry count {} exceeds limit", count));
        }
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let key_len = c.u16()? as usize;
            if key_len > MAX_KEY_LEN {
                return Err(format!("key length {} exceeds limit", key_len));
            }
            let key = std::str::from_utf8(c.take(key_len)?)
                .map_err(|_| "key is not utf8".to_string())?
                .to_string();
            let ndim = c.take(1)?[0];
            if ndim != 2 {
                return Err(format!("entry '{}' has unsupported ndim {}", key, ndim));
            }
            let rows = c.u32()? as usize;
            let cols = c.u32()? as usize;
            let elems = rows.checked_mul(cols).ok_or("dims overflow")?;
            if elems > MAX_ELEMENTS {
                return Err(format!("entry '{}' declares {} elements, over the limit", key, elems));
            }
            let raw = c.take(elems * 8)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            if entries.insert(key.clone(), Tensor::matrix(rows, cols, data).map_err(|e| e.to_string())?).is_some() {
                return Err(format!("duplicate key '{}'", key));
            }
        }
        if c.pos != body.len() {
            return Err(format!("{} trailing bytes after last entry", body.len() - c.pos));
        }
        Ok(entries)
    })();
    chk(path, parse)
}

/// Hex sha256 of a file's full contents; used by the freeze contracts.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| UdcError::io(path.display().to_string(), e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{:02x}", b)).collect())
}

/// Snapshot parameters by name. Duplicate names are a programming error.
pub fn params_to_entries(params: &[Parameter]) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    for p in params {
        let inner = p.borrow();
        let prev = map.insert(inner.name.clone(), inner.value.clone());
        assert!(prev.is_none(), "duplicate parameter name '{}'", inner.name);
    }
    map
}

/// Restore parameter values by name, requiring an exact match of names and
/// shapes for every parameter passed in.
pub fn entries_to_params(path_for_errors: &Path, entries: &BTreeMap<String, Tensor>, params: &[Parameter]) -> Result<()> {
    for p in params {
        let name = p.name();
        let t = entries.get(&name).ok_or_else(|| UdcError::Checkpoint {
            path: path_for_errors.display().to_string(),
            msg: format!("missing entry '{}'", name),
        })?;
        let (pr, pc) = {
            let inner = p.borrow();
            (inner.value.rows(), inner.value.cols())
        };
        if t.rows() != pr || t.cols() != pc {
            return Err(UdcError::Checkpoint {
                path: path_for_errors.display().to_string(),
                msg: format!("entry '{}' is {}x{}, parameter wants {}x{}", name, t.rows(), t.cols(), pr, pc),
            });
        }
        p.set_value(t.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("a/w".to_string(), Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap());
        m.insert("b".to_string(), Tensor::vector(vec![0.25]));
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let entries = sample_entries();
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (k, t) in &entries {
            assert_eq!(loaded[k].data(), t.data(), "{}", k);
            assert_eq!(loaded[k].rows(), t.rows());
        }
    }

    #[test]
    fn identical_content_yields_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &sample_entries()).unwrap();
        save_checkpoint(&p2, &sample_entries()).unwrap();
        assert_eq!(file_checksum(&p1).unwrap(), file_checksum(&p2).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &sample_entries()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{}", err);
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &sample_entries()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn oversized_declared_dims_are_rejected_before_allocation() {
        // Hand-build a file whose entry claims 2^30 elements but carries none.
        let mut body = Vec::new();
        body.extend_from_slice(b"UDCK");
        body.extend_from_slice(&1u32.to_le_bytes());
        body.extend_from_slice(&1u32.to_le_bytes());
        body.extend_from_slice(&1u16.to_le_bytes());
        body.push(b'k');
        body.push(2u8);
        body.extend_from_slice(&(1u32 << 15).to_le_bytes());
        body.extend_from_slice(&(1u32 << 15).to_le_bytes());
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("evil.ckpt");
        std::fs::write(&path, &body).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("over the limit"), "{}", err);
    }

    #[test]
    fn parameters_snapshot_and_restore() {
        let p = Parameter::new("m/w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let q = Parameter::new("m/b", Tensor::vector(vec![9.0]));
        let entries = params_to_entries(&[p.clone(), q.clone()]);
        p.set_value(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        entries_to_params(&path, &loaded, &[p.clone(), q.clone()]).unwrap();
        assert_eq!(p.value().data(), &[1.0, 2.0]);
        assert_eq!(q.value().data(), &[9.0]);
    }

    #[test]
    fn restore_requires_matching_names_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = Parameter::new("present", Tensor::vector(vec![1.0]));
        save_checkpoint(&path, &params_to_entries(&[p.clone()])).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let missing = Parameter::new("absent", Tensor::vector(vec![0.0]));
        assert!(entries_to_params(&path, &loaded, &[missing]).is_err());
        let misshapen = Parameter::new("present", Tensor::vector(vec![0.0, 0.0]));
        assert!(entries_to_params(&path, &loaded, &[misshapen]).is_err());
    }
}
