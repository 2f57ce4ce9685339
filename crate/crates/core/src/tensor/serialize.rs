//! `PIPW` weight files: magic, format version, tensor count, then per tensor
//! the UTF-8 name, rank, dims and a little-endian `f32` payload. All integers
//! are little-endian `u32`.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};
use crate::Scalar;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PIPW";
pub const WEIGHTS_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| TensorError::Format(format!("{what} {v} exceeds u32")))
}

pub fn write_weights<S: Scalar, W: Write>(w: &mut W, tensors: &[(&str, &Tensor<S>)]) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    put_u32(w, WEIGHTS_VERSION)?;
    put_u32(w, to_u32(tensors.len(), "tensor count")?)?;
    for (name, t) in tensors {
        put_u32(w, to_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, to_u32(t.rank(), "rank")?)?;
        for &d in t.shape() {
            put_u32(w, to_u32(d, "dimension")?)?;
        }
        let mut payload = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

pub fn read_weights<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != WEIGHTS_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = get_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}
