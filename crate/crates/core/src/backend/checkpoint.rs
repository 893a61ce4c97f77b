//! `CRL1` container: magic, entry count, then per entry the name, rank,
//! dims and raw values. All integers are u64 little-endian; values are
//! f32 little-endian.

use std::fs;
use std::path::Path;

use super::{BackendError, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRL1";

pub fn encode_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            .ok_or_else(|| BackendError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| BackendError::Checkpoint("size overflow".into()))
    }
}

pub fn decode_entries(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(BackendError::Checkpoint("bad magic (expected CRL1)".into()));
    }
    let count = r.usize()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| BackendError::Checkpoint(format!("entry name: {e}")))?
            .to_string();
        let rank = r.usize()?;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| BackendError::Checkpoint("size overflow".into()))?;
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| BackendError::Checkpoint("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(BackendError::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write_checkpoint<'a>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    fs::write(path, encode_entries(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_entries(&fs::read(path)?)
}
