//! Flat binary container of named `f64` arrays.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! "SNEW" | version | entry_count
//! per entry: name_len | name (UTF-8) | rank | dims[rank] | payload (f64 LE × Π dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::NdArray;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNEW";
pub const CHECKPOINT_VERSION: u64 = 1;

const MAX_RANK: u64 = 8;

pub fn write_checkpoint(path: &Path, entries: &[(String, NdArray)]) -> Result<()> {
    let payload: usize = entries.iter().map(|(n, a)| 32 + n.len() + 8 * (a.shape.len() + a.len())).sum();
    let mut buf = Vec::with_capacity(20 + payload);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, array) in entries {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(array.shape.len() as u64).to_le_bytes());
        for &d in &array.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &array.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, NdArray)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u64()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.usize()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.usize()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = r.u64()?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, NdArray { shape, data }));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}
