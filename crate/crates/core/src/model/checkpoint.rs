//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   8 bytes  "GQECKPT\0"
//! version u32
//! config  u64 length + JSON bytes
//! count   u64
//! tensor  u32 name length + UTF-8 name, u32 rank, rank × u64 dims, f64 data
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save → load is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{GqeError, Result};

const MAGIC: &[u8; 8] = b"GQECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&params.config)?;
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(GqeError::input("checkpoint truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { buf: bytes };
    if cur.take(8)? != MAGIC {
        return Err(GqeError::input("not a checkpoint file (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(GqeError::input(format!("unsupported checkpoint version {version}")));
    }
    let config_len = cur.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)?;
    let mut params = ModelParams::zeros(&config)?;
    let count = cur.u64()? as usize;
    let mut slots = params.named_tensors_mut();
    if count != slots.len() {
        return Err(GqeError::input(format!(
            "checkpoint holds {count} tensors, config implies {}",
            slots.len()
        )));
    }
    for (name, tensor) in slots.iter_mut() {
        let name_len = cur.u32()? as usize;
        let stored =
            std::str::from_utf8(cur.take(name_len)?).map_err(|_| GqeError::input("tensor name is not UTF-8"))?;
        if stored != name {
            return Err(GqeError::input(format!("expected tensor {name}, found {stored}")));
        }
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != tensor.shape {
            return Err(GqeError::input(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                tensor.shape
            )));
        }
        let raw = cur.take(tensor.len() * 8)?;
        for (v, chunk) in tensor.data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    drop(slots);
    if !cur.buf.is_empty() {
        return Err(GqeError::input("trailing bytes after checkpoint"));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| GqeError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| GqeError::io(path, e))?;
    from_bytes(&bytes)
}
