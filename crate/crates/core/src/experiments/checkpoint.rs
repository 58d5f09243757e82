//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PALD"  u32 version
//! u32 metadata length, metadata (UTF-8 `key = value` lines)
//! u32 array count
//! per array, sorted by name:
//!   u16 name length, name, u8 rank, u32 dims[rank], f32 values
//! ```
//!
//! The last metadata line is `content_hash = <hex>`, the SHA-256 of
//! `"blob <n>\0"` followed by the `n` bytes of the array section.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PALD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key = value` pairs, without the content hash.
    pub metadata: BTreeMap<String, String>,
    /// Sorted by name.
    pub arrays: Vec<(String, Tensor)>,
}

fn ck_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn content_hash(section: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", section.len()).as_bytes());
    h.update(section);
    hex::encode(h.finalize())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return ck_err(format!("truncated while reading {what}"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    pub fn new(metadata: BTreeMap<String, String>, mut arrays: Vec<(String, Tensor)>) -> Self {
        arrays.sort_by(|a, b| a.0.cmp(&b.0));
        Self { metadata, arrays }
    }

    pub fn from_store(store: &ParamStore, metadata: BTreeMap<String, String>) -> Self {
        Self::new(metadata, store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {key}")))
    }

    /// Loads the arrays into a store of the same architecture.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        store
            .assign(self.arrays.iter().map(|(n, t)| (n.as_str(), t)))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn array_section(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return ck_err(format!("array {name} has too long a name or too high a rank"));
            }
            out.extend((name.len() as u16).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dimension {d} overflows u32")))?;
                out.extend(d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend((v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.arrays.windows(2).any(|w| w[0].0 >= w[1].0) {
            return ck_err("array names must be unique and sorted");
        }
        let section = self.array_section()?;
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') || k == "content_hash" {
                return ck_err(format!("metadata entry {k:?} cannot be encoded"));
            }
            meta += &format!("{k} = {v}\n");
        }
        meta += &format!("content_hash = {}\n", content_hash(&section));
        let mut out = Vec::with_capacity(12 + meta.len() + section.len());
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((meta.len() as u32).to_le_bytes());
        out.extend(meta.as_bytes());
        out.extend(section);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return ck_err("bad magic; not a PALD checkpoint");
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return ck_err(format!("format version {version}, expected {VERSION}"));
        }
        let meta_len = c.u32("metadata length")? as usize;
        let meta = std::str::from_utf8(c.take(meta_len, "metadata")?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {line:?}")))?;
            if metadata.insert(k.to_string(), v.to_string()).is_some() {
                return ck_err(format!("duplicate metadata key {k}"));
            }
        }
        let Some(want_hash) = metadata.remove("content_hash") else {
            return ck_err("metadata lacks content_hash");
        };
        let section_start = c.pos;
        let n = c.u32("array count")? as usize;
        let mut arrays: Vec<(String, Tensor)> = Vec::new();
        for _ in 0..n {
            let name_len = c.u16("name length")? as usize;
            let name = std::str::from_utf8(c.take(name_len, "array name")?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = c.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= c.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: dimensions {shape:?} exceed the file")))?;
            let raw = c.take(numel * 4, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            if arrays.last().is_some_and(|(prev, _)| *prev >= name) {
                return ck_err(format!("array {name} is out of order or repeated"));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            arrays.push((name, t));
        }
        if c.remaining() != 0 {
            return ck_err(format!("{} trailing bytes", c.remaining()));
        }
        if content_hash(&bytes[section_start..]) != want_hash {
            return ck_err("content hash mismatch");
        }
        Ok(Self { metadata, arrays })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}
