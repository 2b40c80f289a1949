//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   [u8; 8] = "HTCK0001"
//! n       u64                       number of entries
//! entry_i u32 name_len, name bytes (UTF-8),
//!         u32 rank, u64 dims[rank],
//!         u64 byte offset into payload
//! plen    u64                       payload length in bytes
//! payload f32 little-endian data per entry
//! sum     u64                       FNV-1a 64 checksum of payload
//! ```
//!
//! Round-trips are bit-exact for `f32` tensors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nn::ParameterStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HTCK0001";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Serialize named tensors in iteration order.
pub fn to_bytes<'a>(entries: impl Iterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let entries: Vec<(&str, &Tensor<f32>)> = entries.collect();
    let mut header = Vec::new();
    let mut payload = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in &entries {
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &x in &t.data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    header.extend_from_slice(&payload);
    header.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    header
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load("checkpoint truncated".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint, verifying structure and payload checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Load("bad checkpoint magic".to_string()));
    }
    let n = r.u64()? as usize;
    let mut metas = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Load("non-UTF8 entry name".to_string()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        metas.push((name, shape, offset));
    }
    let plen = r.u64()? as usize;
    let payload = r.take(plen)?;
    let stored_sum = r.u64()?;
    if fnv1a64(payload) != stored_sum {
        return Err(Error::Load("checkpoint checksum mismatch".to_string()));
    }
    let mut out = Vec::with_capacity(n);
    for (name, shape, offset) in metas {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 4;
        if end > payload.len() {
            return Err(Error::Load(format!("entry '{name}' out of bounds")));
        }
        let data: Vec<f32> = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: impl Iterator<Item = (String, Tensor<f32>)>) -> Result<()> {
    let owned: Vec<(String, Tensor<f32>)> = entries.collect();
    let bytes = to_bytes(owned.iter().map(|(n, t)| (n.as_str(), t)));
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Load into a map for random access (e.g. optimizer-state restore).
pub fn load_map(path: &Path) -> Result<HashMap<String, Tensor<f32>>> {
    Ok(load(path)?.into_iter().collect())
}

/// Overwrite store parameters from checkpoint entries, requiring an exact
/// name/shape match for every registered parameter.
pub fn restore_store(
    ps: &mut ParameterStore<f32>,
    entries: &HashMap<String, Tensor<f32>>,
) -> Result<()> {
    let names: Vec<String> = ps.names().map(String::from).collect();
    for name in names {
        let src = entries
            .get(&name)
            .ok_or_else(|| Error::Load(format!("checkpoint missing parameter '{name}'")))?;
        let dst = ps.get_mut(&name)?;
        if src.shape != dst.shape {
            return Err(Error::Load(format!(
                "shape mismatch for '{name}': {:?} vs {:?}",
                src.shape, dst.shape
            )));
        }
        dst.data.copy_from_slice(&src.data);
    }
    Ok(())
}
