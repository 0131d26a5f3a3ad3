//! Head parallelism: one all-to-all turns sequence shards into head shards
//! over the full sequence, attention runs locally per owned head group, and a
//! second all-to-all returns results to sequence sharding.

use alloc::vec::Vec;

use super::{check_local_shard, record, WorkerBackward, WorkerForward};
use crate::attention::{attention_delta, blockwise_attention, blockwise_attention_backward, AttentionState, GradientBundle, KernelOptions};
use crate::comm::{all_to_all, Communicator, Message};
use crate::error::{Error, Result};
use crate::shard::ShardSpec;
use crate::tensor::Tensor;
use crate::volume::{
    backward_flops, forward_flops, MessageClass, RoundKind, RoundVolume, HEAD_BACKWARD_KV, HEAD_BACKWARD_OUT_KV,
    HEAD_BACKWARD_OUT_Q, HEAD_BACKWARD_Q, HEAD_FORWARD_KV, HEAD_FORWARD_OUT, HEAD_FORWARD_Q,
};

fn head_group(heads: usize, workers: usize) -> Result<usize> {
    if workers == 0 || heads % workers != 0 {
        return Err(Error::HeadsNotDivisible { heads, workers });
    }
    Ok(heads / workers)
}

/// For each destination worker, the head slice it owns of every tensor in `parts`.
fn split_by_heads(parts: &[&Tensor], workers: usize, group: usize) -> Result<Vec<Vec<Tensor>>> {
    (0..workers)
        .map(|dst| parts.iter().map(|t| t.slice_axis(0, dst * group..(dst + 1) * group)).collect())
        .collect()
}

/// Concatenates the `idx`-th tensor of every received message along `axis`.
fn gather(received: &[Message], idx: usize, axis: usize) -> Result<Tensor> {
    let parts: Vec<Tensor> = received.iter().map(|m| m.tensors[idx].clone()).collect();
    Tensor::concat(axis, &parts)
}

/// Sends chunks with a per-class byte record; self chunks are free.
fn exchange<C: Communicator + ?Sized>(
    comm: &mut C,
    chunks: Vec<Vec<Tensor>>,
    classes: &[MessageClass],
    round: &mut RoundVolume,
) -> Result<Vec<Message>> {
    let me = comm.rank();
    let msgs: Vec<Message> = chunks.into_iter().map(Message::new).collect();
    for (dst, m) in msgs.iter().enumerate() {
        record(round, m, classes, dst != me);
    }
    let received = all_to_all(comm, msgs)?;
    for m in &received {
        if m.tensors.len() != classes.len() {
            return Err(Error::ShardMetadata(alloc::format!(
                "all-to-all chunk with {} tensors, expected {}",
                m.tensors.len(),
                classes.len()
            )));
        }
    }
    Ok(received)
}

fn concat_classes(a: &[MessageClass], b: &[MessageClass]) -> Vec<MessageClass> {
    a.iter().chain(b).copied().collect()
}

pub fn head_parallel_forward<C: Communicator + ?Sized>(
    comm: &mut C,
    shards: &ShardSpec,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    opts: &KernelOptions,
) -> Result<WorkerForward> {
    check_local_shard(comm, shards, q, k, v)?;
    let n = comm.size();
    let heads = q.shape()[0];
    let group = head_group(heads, n)?;

    let mut scatter = RoundVolume::new(RoundKind::Exchange);
    let chunks = split_by_heads(&[q, k, v], n, group)?;
    let received = exchange(comm, chunks, &concat_classes(&HEAD_FORWARD_Q, &HEAD_FORWARD_KV), &mut scatter)?;
    let (q_full, k_full, v_full) = (gather(&received, 0, 1)?, gather(&received, 1, 1)?, gather(&received, 2, 1)?);
    scatter.flops = forward_flops(q_full.shape()[1], k_full.shape()[1], group, q.shape()[2]);

    let local = blockwise_attention(&q_full, &k_full, &v_full, opts)?;

    let mut restore = RoundVolume::new(RoundKind::Exchange);
    let chunks = (0..n)
        .map(|dst| {
            let rows = shards.q_ranges[dst].clone();
            Ok(alloc::vec![local.o.slice_axis(1, rows.clone())?, local.l.slice_axis(1, rows)?])
        })
        .collect::<Result<Vec<_>>>()?;
    let received = exchange(comm, chunks, &HEAD_FORWARD_OUT, &mut restore)?;
    let state = AttentionState { o: gather(&received, 0, 0)?, l: gather(&received, 1, 0)? };
    Ok(WorkerForward { state, trace: alloc::vec![scatter, restore] })
}

#[allow(clippy::too_many_arguments)]
pub fn head_parallel_backward<C: Communicator + ?Sized>(
    comm: &mut C,
    shards: &ShardSpec,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    state: &AttentionState,
    d_o: &Tensor,
    opts: &KernelOptions,
) -> Result<WorkerBackward> {
    check_local_shard(comm, shards, q, k, v)?;
    let n = comm.size();
    let heads = q.shape()[0];
    let group = head_group(heads, n)?;
    let delta = attention_delta(&state.o, d_o)?;

    let mut scatter = RoundVolume::new(RoundKind::Exchange);
    let chunks = split_by_heads(&[q, d_o, &state.l, &delta, k, v], n, group)?;
    let received = exchange(comm, chunks, &concat_classes(&HEAD_BACKWARD_Q, &HEAD_BACKWARD_KV), &mut scatter)?;
    let q_full = gather(&received, 0, 1)?;
    let do_full = gather(&received, 1, 1)?;
    let l_full = gather(&received, 2, 1)?;
    let d_full = gather(&received, 3, 1)?;
    let k_full = gather(&received, 4, 1)?;
    let v_full = gather(&received, 5, 1)?;
    scatter.flops = backward_flops(q_full.shape()[1], k_full.shape()[1], group, q.shape()[2]);

    let g = blockwise_attention_backward(&q_full, &k_full, &v_full, &l_full, &d_full, &do_full, opts.scale)?;

    let mut restore = RoundVolume::new(RoundKind::Exchange);
    let chunks = (0..n)
        .map(|dst| {
            let (qr, kr) = (shards.q_ranges[dst].clone(), shards.kv_ranges[dst].clone());
            Ok(alloc::vec![g.dq.slice_axis(1, qr)?, g.dk.slice_axis(1, kr.clone())?, g.dv.slice_axis(1, kr)?])
        })
        .collect::<Result<Vec<_>>>()?;
    let received = exchange(comm, chunks, &concat_classes(&HEAD_BACKWARD_OUT_Q, &HEAD_BACKWARD_OUT_KV), &mut restore)?;
    let grads = GradientBundle { dq: gather(&received, 0, 0)?, dk: gather(&received, 1, 0)?, dv: gather(&received, 2, 0)? };
    Ok(WorkerBackward { grads, trace: alloc::vec![scatter, restore] })
}
