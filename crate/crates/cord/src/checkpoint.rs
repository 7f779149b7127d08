//! CORDCKPT binary checkpoint format.
//!
//! Layout: magic `CORDCKPT`, format version (u32 LE), precision tag (u32 LE,
//! bytes per scalar), tensor count (u32 LE), then per tensor: name length +
//! UTF-8 name, rank + u64 dims, raw little-endian scalars.

use crate::error::{CordError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CORDCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn save<F: Scalar>(params: &ModelParams<F>, path: &Path) -> Result<()> {
    let as_str = path.display().to_string();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CordError::io(as_str.clone(), e))?;
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&F::PRECISION_TAG.to_le_bytes());
    let named = params.named_tensors();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            v.write_le(&mut buf);
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| CordError::io(as_str.clone(), e))?;
    file.write_all(&buf).map_err(|e| CordError::io(as_str, e))?;
    Ok(())
}

pub fn load<F: Scalar>(config: ModelConfig, path: &Path) -> Result<ModelParams<F>> {
    let as_str = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CordError::io(as_str.clone(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| CordError::io(as_str.clone(), e))?;
    let mut r = Cursor { bytes: &bytes, pos: 0 };

    if r.take(8)? != MAGIC {
        return Err(CordError::Checkpoint(format!("{}: bad magic", as_str)));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CordError::Checkpoint(format!(
            "{}: unsupported format version {}",
            as_str, version
        )));
    }
    let precision = r.u32()?;
    if precision != F::PRECISION_TAG {
        return Err(CordError::Checkpoint(format!(
            "{}: precision tag {} does not match requested scalar width {}",
            as_str,
            precision,
            F::PRECISION_TAG
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CordError::Checkpoint(format!("{}: invalid tensor name", as_str)))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let width = F::PRECISION_TAG as usize;
        let raw = r.take(n * width)?;
        let data: Vec<F> = raw.chunks_exact(width).map(F::read_le).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    ModelParams::from_named(config, tensors)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CordError::Checkpoint("truncated checkpoint".into()));
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
