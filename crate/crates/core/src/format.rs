//! The `LVXT` binary tensor format.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "LVXT"
//! 4       4         version, u32 = 1
//! 8       1         dtype, u8 (0 = f32, 1 = f64)
//! 9       1         ndim, u8
//! 10      8*ndim    dims, u64 each
//! ...     numel*sz  row-major payload
//! ```
//!
//! Every integer and element is little-endian.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Buffer, DType, Tensor};

pub const MAGIC: &[u8; 4] = b"LVXT";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.ndim() + t.byte_size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.buffer() {
        Buffer::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Buffer::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(Error::TruncatedHeader);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(bytes[8])?;
    let ndim = bytes[9] as usize;
    if ndim == 0 || ndim > 3 {
        return Err(Error::Rank(ndim));
    }
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::TruncatedHeader);
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 10 + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::TruncatedHeader)?);
    }
    let expected = shape
        .iter()
        .try_fold(dtype.size_bytes(), |acc, &d| acc.checked_mul(d))
        .ok_or(Error::TruncatedHeader)?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes(payload.len() - expected));
    }
    match dtype {
        DType::F32 => Tensor::from_f32(
            &shape,
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::F64 => Tensor::from_f64(
            &shape,
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
    }
}
