//! Deterministic test-input generation.
//!
//! Values come from ChaCha8 keyed by the 64-bit seed. ChaCha is a counter
//! based generator: `(seed, stream)` selects an independent keystream, so a
//! worker can derive its own shard of a fixture from `(seed, worker_id)`
//! without talking to anyone. Each element consumes one `u64`; the top 53
//! bits become a uniform `u` in `[0, 1)` and the element is `(2u - 1) * scale`
//! (rounded to nearest for f32).

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Seed(pub u64);

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

pub fn seeded_random_tensor(seed: Seed, shape: &[usize], dtype: DType, scale: f64) -> Result<Tensor> {
    seeded_random_tensor_stream(seed, 0, shape, dtype, scale)
}

/// Like [`seeded_random_tensor`] but drawing from keystream `stream` of `seed`.
pub fn seeded_random_tensor_stream(
    seed: Seed,
    stream: u64,
    shape: &[usize],
    dtype: DType,
    scale: f64,
) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::EmptyShape);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::NonPositiveScale(scale));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    rng.set_stream(stream);
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            (2.0 * u - 1.0) * scale
        })
        .collect();
    Tensor::from_f64_as(dtype, shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a = seeded_random_tensor(Seed(1), &[2, 2], DType::F64, 1.0).unwrap();
        let b = seeded_random_tensor(Seed(1), &[2, 2], DType::F64, 1.0).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn different_seeds_differ() {
        let a = seeded_random_tensor(Seed(1), &[2, 2], DType::F64, 1.0).unwrap();
        let b = seeded_random_tensor(Seed(2), &[2, 2], DType::F64, 1.0).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn streams_are_independent() {
        let a = seeded_random_tensor_stream(Seed(5), 0, &[8], DType::F64, 1.0).unwrap();
        let b = seeded_random_tensor_stream(Seed(5), 1, &[8], DType::F64, 1.0).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn bad_arguments() {
        assert_eq!(seeded_random_tensor(Seed(1), &[2, 0], DType::F64, 1.0), Err(Error::EmptyShape));
        assert_eq!(seeded_random_tensor(Seed(1), &[2, 2], DType::F64, 0.0), Err(Error::NonPositiveScale(0.0)));
    }

    #[test]
    fn values_within_scale() {
        let t = seeded_random_tensor(Seed(9), &[1000], DType::F32, 0.5).unwrap();
        assert!(t.to_f64_vec().iter().all(|x| x.abs() <= 0.5));
        assert!(t.max_abs() > 0.4);
    }

    #[test]
    fn known_first_values_are_stable() {
        // Frozen so that a generator upgrade that changes the stream is caught.
        let t = seeded_random_tensor(Seed(1), &[2], DType::F64, 1.0).unwrap();
        let bits: Vec<u64> = t.as_f64().unwrap().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, FROZEN_SEED1);
    }

    const FROZEN_SEED1: [u64; 2] = [13819566705605827576, 13829106391488461918];
}
