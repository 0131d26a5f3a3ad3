//! Exact distributed cross-attention.
//!
//! This crate holds everything that does not need an operating system:
//! dense tensors and their binary encoding, exact attention kernels
//! (dense oracle, tiled online-softmax forward, logsumexp merge, backward),
//! the worker-side rotation protocols written against the [`comm::Communicator`]
//! trait, closed-form runtime/volume/memory models, and a toy cross-attention
//! language model used to study activation recomputation.
//!
//! The `lvx` crate supplies the threaded transport, file IO and the CLI.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analytics;
pub mod attention;
pub mod comm;
pub mod error;
pub mod format;
mod linalg;
pub mod mllm;
pub mod rng;
pub mod shard;
pub mod strategy;
pub mod tensor;
pub mod volume;

pub use attention::{AttentionState, GradientBundle, KernelOptions};
pub use error::{Error, Result};
pub use shard::{partition_rows, ShardSpec};
pub use tensor::{DType, Tensor};
