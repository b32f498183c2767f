//! Checkpoint file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  b"DTCKPT01"
//! meta    u32 length + that many bytes of UTF-8 JSON
//! count   u32 tensor count
//! tensor  u32 name length, name bytes,
//!         u64 rows, u64 cols,
//!         rows*cols f64 values
//! ```
//!
//! Tensors are written in BTreeMap order, so a checkpoint's bytes are a
//! pure function of its contents.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DTCKPT01";

fn encode_tensors(buf: &mut Vec<u8>, tensors: &BTreeMap<String, Tensor>) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save(path: &Path, meta: &serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let meta_bytes = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    encode_tensors(&mut buf, tensors);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Hex SHA-256 over the tensor section of the checkpoint encoding. Two
/// parameter sets digest equal iff they are bitwise equal, so reports can
/// record which frozen weights produced a number.
pub fn digest(tensors: &BTreeMap<String, Tensor>) -> String {
    let mut buf: Vec<u8> = Vec::new();
    encode_tensors(&mut buf, tensors);
    hex::encode(Sha256::digest(&buf))
}

pub fn load(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };

    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let meta_len = cur.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(cur.take(meta_len)?)?;
    let count = cur.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Data(format!("checkpoint tensor name: {e}")))?
            .to_string();
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Data("checkpoint tensor size overflow".into()))?;
        let raw = cur.take(n * 8)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, Tensor { rows, cols, data });
    }
    Ok((meta, tensors))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.w".to_string(),
            Tensor::from_vec(2, 3, vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.1]).unwrap(),
        );
        tensors.insert("z.b".to_string(), Tensor::zeros(1, 4));
        let meta = json!({"epoch": 7, "config_hash": "abc"});
        save(&path, &meta, &tensors).unwrap();
        let (m2, t2) = load(&path).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(t2, tensors);
    }

    #[test]
    fn identical_content_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), Tensor::from_vec(1, 2, vec![0.5, 0.25]).unwrap());
        let meta = json!({"epoch": 1});
        save(&p1, &meta, &tensors).unwrap();
        save(&p2, &meta, &tensors).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn digest_separates_bitwise_differences() {
        let mut a = BTreeMap::new();
        a.insert("w".to_string(), Tensor::from_vec(1, 2, vec![0.5, 0.25]).unwrap());
        let mut b = a.clone();
        assert_eq!(digest(&a), digest(&b));
        b.get_mut("w").unwrap().data[1] = 0.25 + f64::EPSILON;
        assert_ne!(digest(&a), digest(&b));
        assert_eq!(digest(&a).len(), 64);
        a.insert("x".to_string(), Tensor::zeros(1, 1));
        assert_ne!(digest(&a), digest(&b));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), Tensor::zeros(4, 4));
        save(&path, &serde_json::json!({}), &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load(&path).is_err());
    }
}
