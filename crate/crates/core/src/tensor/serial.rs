//! Raw tensor serialization.
//!
//! Layout: magic `CLTN`, version u32, rank u32, dims u32[rank], then the
//! data as little-endian f64 in row-major order. Used by the checkpoint
//! format for parameters and optimizer moments.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const TENSOR_MAGIC: &[u8; 4] = b"CLTN";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

/// A tensor value detached from any gradient machinery: what checkpoints
/// and wire formats carry. Thread-safe, unlike a live [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorBlob {
    pub fn from_tensor(t: &Tensor) -> TensorBlob {
        TensorBlob { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.data.clone(), &self.shape)
    }

    pub fn to_param(&self) -> Result<Tensor> {
        Tensor::param(self.data.clone(), &self.shape)
    }
}

pub fn write_blob(w: &mut impl Write, b: &TensorBlob) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
    let rank = b.shape.len() as u32;
    w.write_all(&rank.to_le_bytes())?;
    for &d in &b.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &b.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_blob(w, &TensorBlob::from_tensor(t))
}

pub fn read_blob(r: &mut impl Read) -> Result<TensorBlob> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Decode(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TENSOR_FORMAT_VERSION {
        return Err(TensorError::Decode(format!(
            "unsupported tensor format version {version} (expected {TENSOR_FORMAT_VERSION})"
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(TensorError::Decode(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok(TensorBlob { shape, data })
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    read_blob(r)?.to_tensor()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
