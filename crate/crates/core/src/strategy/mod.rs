//! Worker-side distributed attention protocols.
//!
//! Each function here is called collectively: every worker of the cluster
//! runs it with its own shard and its own [`Communicator`]. Tensors are
//! `[heads, rows, cols]`; shards split the row axis per [`ShardSpec`].

mod head;
mod lvx;
mod ring;

use alloc::format;
use alloc::vec::Vec;

pub use head::{head_parallel_backward, head_parallel_forward};
pub use lvx::{lvx_backward, lvx_forward};
pub use ring::{ring_backward, ring_forward};

use crate::attention::{dense_attention, dense_attention_backward, AttentionState, GradientBundle, KernelOptions};
use crate::comm::{BlockMeta, Communicator, Message};
use crate::error::{Error, Result};
use crate::shard::ShardSpec;
use crate::tensor::Tensor;
use crate::volume::{forward_flops, backward_flops, MessageClass, RoundKind, RoundVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StrategyKind {
    LvXAttn,
    RingAttention,
    HeadParallel,
    SingleWorker,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] =
        [StrategyKind::LvXAttn, StrategyKind::RingAttention, StrategyKind::HeadParallel, StrategyKind::SingleWorker];

    pub const fn name(self) -> &'static str {
        match self {
            StrategyKind::LvXAttn => "lvx",
            StrategyKind::RingAttention => "ring",
            StrategyKind::HeadParallel => "head",
            StrategyKind::SingleWorker => "single",
        }
    }

    /// Checks the strategy's constraints on head and worker counts.
    pub fn validate(self, heads: usize, workers: usize) -> Result<()> {
        if workers == 0 {
            return Err(Error::NoWorkers);
        }
        match self {
            StrategyKind::HeadParallel if heads % workers != 0 => Err(Error::HeadsNotDivisible { heads, workers }),
            StrategyKind::SingleWorker if workers != 1 => {
                Err(Error::InvalidConfig(format!("single-worker strategy with {} workers", workers)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerForward {
    pub state: AttentionState,
    pub trace: Vec<RoundVolume>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerBackward {
    pub grads: GradientBundle,
    pub trace: Vec<RoundVolume>,
}

/// Runs `kind`'s forward protocol on this worker's shard.
pub fn forward<C: Communicator + ?Sized>(
    kind: StrategyKind,
    comm: &mut C,
    shards: &ShardSpec,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    opts: &KernelOptions,
) -> Result<WorkerForward> {
    kind.validate(q.shape().first().copied().unwrap_or(0), comm.size())?;
    match kind {
        StrategyKind::LvXAttn => lvx_forward(comm, shards, q, k, v, opts),
        StrategyKind::RingAttention => ring_forward(comm, shards, q, k, v, opts),
        StrategyKind::HeadParallel => head_parallel_forward(comm, shards, q, k, v, opts),
        StrategyKind::SingleWorker => {
            let state = dense_attention(q, k, v, opts.scale)?;
            let mut round = RoundVolume::new(RoundKind::Compute);
            round.flops = forward_flops(q.shape()[1], k.shape()[1], q.shape()[0], q.shape()[2]);
            Ok(WorkerForward { state, trace: alloc::vec![round] })
        }
    }
}

/// Runs `kind`'s backward protocol given this worker's forward output and upstream gradient.
#[allow(clippy::too_many_arguments)]
pub fn backward<C: Communicator + ?Sized>(
    kind: StrategyKind,
    comm: &mut C,
    shards: &ShardSpec,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    state: &AttentionState,
    d_o: &Tensor,
    opts: &KernelOptions,
) -> Result<WorkerBackward> {
    kind.validate(q.shape().first().copied().unwrap_or(0), comm.size())?;
    match kind {
        StrategyKind::LvXAttn => lvx_backward(comm, shards, q, k, v, state, d_o, opts),
        StrategyKind::RingAttention => ring_backward(comm, shards, q, k, v, state, d_o, opts),
        StrategyKind::HeadParallel => head_parallel_backward(comm, shards, q, k, v, state, d_o, opts),
        StrategyKind::SingleWorker => {
            let grads = dense_attention_backward(q, k, v, &state.o, &state.l, d_o, opts.scale)?;
            let mut round = RoundVolume::new(RoundKind::Compute);
            round.flops = backward_flops(q.shape()[1], k.shape()[1], q.shape()[0], q.shape()[2]);
            Ok(WorkerBackward { grads, trace: alloc::vec![round] })
        }
    }
}

/// Verifies that the local shard agrees with the cluster-wide [`ShardSpec`].
fn check_local_shard<C: Communicator + ?Sized>(comm: &C, shards: &ShardSpec, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    let (n, i) = (comm.size(), comm.rank());
    if shards.workers() != n || shards.kv_ranges.len() != n {
        return Err(Error::ShardMetadata(format!("spec for {} workers in a cluster of {}", shards.workers(), n)));
    }
    for (t, name) in [(q, "Q"), (k, "K"), (v, "V")] {
        if t.ndim() != 3 {
            return Err(Error::ShapeMismatch(format!("{} must be [h, rows, d], got {:?}", name, t.shape())));
        }
    }
    if q.shape()[1] != shards.q_rows(i) {
        return Err(Error::ShardMetadata(format!(
            "worker {} holds {} query rows, spec says {:?}",
            i,
            q.shape()[1],
            shards.q_ranges[i]
        )));
    }
    if k.shape()[1] != shards.kv_rows(i) || v.shape()[1] != shards.kv_rows(i) {
        return Err(Error::ShardMetadata(format!(
            "worker {} holds {} key rows, spec says {:?}",
            i,
            k.shape()[1],
            shards.kv_ranges[i]
        )));
    }
    Ok(())
}

fn q_meta(shards: &ShardSpec, block: usize) -> BlockMeta {
    let r = &shards.q_ranges[block];
    BlockMeta { owner: block, start: r.start, end: r.end }
}

fn kv_meta(shards: &ShardSpec, block: usize) -> BlockMeta {
    let r = &shards.kv_ranges[block];
    BlockMeta { owner: block, start: r.start, end: r.end }
}

/// Checks a received message against the block the protocol expects next.
fn expect_block(msg: &Message, expected: BlockMeta, tensors: usize) -> Result<()> {
    if msg.meta != Some(expected) {
        return Err(Error::ShardMetadata(format!("expected block {:?}, received {:?}", expected, msg.meta)));
    }
    if msg.tensors.len() != tensors {
        return Err(Error::ShardMetadata(format!("expected {} tensors, received {}", tensors, msg.tensors.len())));
    }
    Ok(())
}

/// Adds the payload of `msg`, labelled by `classes`, to `round` when it leaves this worker.
fn record(round: &mut RoundVolume, msg: &Message, classes: &[MessageClass], remote: bool) {
    debug_assert_eq!(msg.tensors.len(), classes.len());
    if remote {
        for (t, &c) in msg.tensors.iter().zip(classes) {
            round.bytes.add_class(c, t.byte_size() as u64);
        }
    }
}

fn row_count(t: &Tensor) -> usize {
    t.shape()[1]
}
