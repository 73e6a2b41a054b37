//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "LSDC"
//! version      u32      1
//! precision    u8       bytes per element (4 = f32, 8 = f64)
//! count        u32      number of tensors
//! per tensor:  u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
//!              u64 byte offset of the tensor data within the data section
//! data         raw little-endian elements, tensors back to back
//! ```

use std::path::Path;

use super::network::Model;
use super::tensor::{ParamSet, Tensor};
use crate::error::{LsdError, Result};
use crate::real::{Precision, Real};

pub const MAGIC: &[u8; 4] = b"LSDC";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint<F: Real>(params: &ParamSet<F>) -> Vec<u8> {
    let width = F::PRECISION.width();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width as u8);
    out.extend_from_slice(&(params.names().len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.len() * width) as u64;
    }
    for t in params.tensors() {
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LsdError::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Precision recorded in a checkpoint header.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<Precision> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(LsdError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LsdError::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let width = r.u8()?;
    Precision::from_width(width).ok_or_else(|| LsdError::CorruptCheckpoint(format!("bad precision flag {width}")))
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<ParamSet<F>> {
    let precision = checkpoint_precision(bytes)?;
    if precision != F::PRECISION {
        return Err(LsdError::CorruptCheckpoint(format!(
            "checkpoint stores {precision} data, {} requested",
            F::PRECISION
        )));
    }
    let width = precision.width();
    let mut r = Reader { bytes, pos: 9 };
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    let mut expected_offset = 0u64;
    for i in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| LsdError::CorruptCheckpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(LsdError::CorruptCheckpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()?;
        if offset != expected_offset {
            return Err(LsdError::CorruptCheckpoint(format!(
                "tensor `{name}` offset {offset}, expected {expected_offset}"
            )));
        }
        let elems = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| LsdError::CorruptCheckpoint(format!("tensor `{name}` shape overflows")))?;
        expected_offset += (elems * width) as u64;
        manifest.push((name, shape, elems));
    }
    let data = &bytes[r.pos..];
    if data.len() as u64 != expected_offset {
        return Err(LsdError::CorruptCheckpoint(format!(
            "data section has {} bytes, manifest describes {expected_offset}",
            data.len()
        )));
    }
    let mut params = ParamSet::new();
    let mut pos = 0;
    for (name, shape, elems) in manifest {
        let values = data[pos..pos + elems * width]
            .chunks_exact(width)
            .map(F::read_le)
            .collect();
        pos += elems * width;
        params.push(name, Tensor { shape, data: values });
    }
    Ok(params)
}

pub fn save_checkpoint<F: Real>(params: &ParamSet<F>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| LsdError::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ParamSet<F>> {
    let bytes = std::fs::read(path).map_err(|e| LsdError::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl<F: Real> Model<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self.params(), path)
    }

    /// Loads a checkpoint, inferring the model dimensions from it.
    pub fn load(path: &Path) -> Result<Self> {
        Model::from_params(load_checkpoint(path)?)
    }

    /// Loads a checkpoint into this already-configured model.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let params = load_checkpoint(path)?;
        self.set_params(params)
    }
}
