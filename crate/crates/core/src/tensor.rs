//! Dense row-major tensors.
//!
//! Attention tensors use the layout `[heads, rows, cols]` with the head axis
//! outermost, so a head range or a row range of every head can be sliced
//! without strides.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub const fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub const fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::UnknownDType(other)),
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buffer {
    fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }
}

/// Dense tensor with one to three axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Buffer,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::Rank(shape.len()));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::DataLength { len, expected });
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self { shape: shape.to_vec(), data: Buffer::F32(data) })
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self { shape: shape.to_vec(), data: Buffer::F64(data) })
    }

    /// Builds a tensor of `dtype` from f64 values, rounding to nearest for f32.
    pub fn from_f64_as(dtype: DType, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        match dtype {
            DType::F64 => Self::from_f64(shape, data),
            DType::F32 => Self::from_f32(shape, data.into_iter().map(|x| x as f32).collect()),
        }
    }

    pub fn zeros(dtype: DType, shape: &[usize]) -> Result<Self> {
        Self::full(dtype, shape, 0.0)
    }

    pub fn full(dtype: DType, shape: &[usize], value: f64) -> Result<Self> {
        let len = shape.iter().product();
        match dtype {
            DType::F32 => Self::from_f32(shape, vec![value as f32; len]),
            DType::F64 => Self::from_f64(shape, vec![value; len]),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn byte_size(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }

    pub fn buffer(&self) -> &Buffer {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Buffer::F32(v) => Some(v),
            Buffer::F64(_) => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            Buffer::F64(v) => Some(v),
            Buffer::F32(_) => None,
        }
    }

    /// Widens every element to f64 (exact for both dtypes).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Buffer::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::F64(v) => v.clone(),
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        Tensor::from_f64_as(dtype, &self.shape, self.to_f64_vec()).expect("shape already valid")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.numel())?;
        Ok(Tensor { shape: shape.to_vec(), data: self.data })
    }

    /// True when every element is finite, or additionally −∞ when `allow_neg_inf`.
    pub fn is_finite(&self, allow_neg_inf: bool) -> bool {
        let ok = |x: f64| x.is_finite() || (allow_neg_inf && x == f64::NEG_INFINITY);
        match &self.data {
            Buffer::F32(v) => v.iter().all(|&x| ok(x as f64)),
            Buffer::F64(v) => v.iter().all(|&x| ok(x)),
        }
    }

    /// Bitwise equality of shape, dtype and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (Buffer::F32(a), Buffer::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Buffer::F64(a), Buffer::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }

    /// Sub-tensor over `range` of `axis`.
    pub fn slice_axis(&self, axis: usize, range: Range<usize>) -> Result<Tensor> {
        if axis >= self.ndim() || range.start > range.end || range.end > self.shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice {:?} of axis {} out of bounds for shape {:?}",
                range, axis, self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = range.len();
        macro_rules! gather {
            ($v:expr) => {{
                let mut out = Vec::with_capacity(outer * range.len() * inner);
                for o in 0..outer {
                    let base = o * dim * inner;
                    out.extend_from_slice(&$v[base + range.start * inner..base + range.end * inner]);
                }
                out
            }};
        }
        let data = match &self.data {
            Buffer::F32(v) => Buffer::F32(gather!(v)),
            Buffer::F64(v) => Buffer::F64(gather!(v)),
        };
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along `axis`; all other axes and the dtype must agree.
    pub fn concat(axis: usize, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?;
        if axis >= first.ndim() {
            return Err(Error::ShapeMismatch(format!("axis {} out of range", axis)));
        }
        for p in parts {
            if p.dtype() != first.dtype() {
                return Err(Error::DTypeMismatch("concat operands differ".into()));
            }
            let same = p.ndim() == first.ndim()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concat {:?} with {:?} along axis {}",
                    p.shape, first.shape, axis
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        macro_rules! join {
            ($variant:ident) => {{
                let mut out = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for p in parts {
                        let span = p.shape[axis] * inner;
                        if let Buffer::$variant(v) = &p.data {
                            out.extend_from_slice(&v[o * span..(o + 1) * span]);
                        }
                    }
                }
                Buffer::$variant(out)
            }};
        }
        let data = match first.dtype() {
            DType::F32 => join!(F32),
            DType::F64 => join!(F64),
        };
        Ok(Tensor { shape, data })
    }

    /// Elementwise sum of two tensors of identical shape and dtype.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("add {:?} + {:?}", self.shape, other.shape)));
        }
        let data = match (&self.data, &other.data) {
            (Buffer::F32(a), Buffer::F32(b)) => Buffer::F32(a.iter().zip(b).map(|(x, y)| x + y).collect()),
            (Buffer::F64(a), Buffer::F64(b)) => Buffer::F64(a.iter().zip(b).map(|(x, y)| x + y).collect()),
            _ => return Err(Error::DTypeMismatch("add operands differ".into())),
        };
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Largest absolute elementwise difference against `other`, both widened to f64.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.to_f64_vec()
            .iter()
            .zip(other.to_f64_vec())
            .map(|(a, b)| if a == &b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.to_f64_vec().iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_rank() {
        assert!(matches!(Tensor::from_f64(&[2, 2], vec![0.0; 3]), Err(Error::DataLength { .. })));
        assert_eq!(Tensor::from_f64(&[], vec![]), Err(Error::Rank(0)));
        assert_eq!(Tensor::from_f64(&[1, 1, 1, 1], vec![0.0]), Err(Error::Rank(4)));
    }

    #[test]
    fn slice_then_concat_restores() {
        let t = Tensor::from_f64(&[2, 5, 3], (0..30).map(|x| x as f64).collect()).unwrap();
        let parts = [t.slice_axis(1, 0..2).unwrap(), t.slice_axis(1, 2..2).unwrap(), t.slice_axis(1, 2..5).unwrap()];
        assert_eq!(parts[1].shape(), &[2, 0, 3]);
        assert!(Tensor::concat(1, &parts).unwrap().bit_eq(&t));
        let heads = [t.slice_axis(0, 0..1).unwrap(), t.slice_axis(0, 1..2).unwrap()];
        assert!(Tensor::concat(0, &heads).unwrap().bit_eq(&t));
    }

    #[test]
    fn slice_out_of_bounds() {
        let t = Tensor::zeros(DType::F32, &[1, 4, 2]).unwrap();
        assert!(t.slice_axis(1, 3..5).is_err());
        assert!(t.slice_axis(3, 0..1).is_err());
    }

    #[test]
    fn neg_inf_allowed_only_when_requested() {
        let t = Tensor::from_f64(&[2], vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert!(!t.is_finite(false));
        assert!(t.is_finite(true));
        let nan = Tensor::from_f64(&[1], vec![f64::NAN]).unwrap();
        assert!(!nan.is_finite(true));
    }
}
