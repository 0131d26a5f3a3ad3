//! Query rotation: key-value blocks stay put, query blocks travel with
//! their partial output and logsumexp statistics.
//!
//! In round `r` worker `i` works on query block `j = (i - r) mod n`. It posts
//! `{O_{j+1}, L_{j+1}, Q_j}` to its successor, computes the partial state of
//! `Q_j` against its resident `K_i, V_i`, receives `{O_j, L_j, Q_{j-1}}` from
//! its predecessor and folds the partial state into `O_j, L_j`. Round 0 ships
//! an empty state. After `n` rounds worker `i` holds the finished state of
//! block `i + 1`; one epilogue hop returns every block to its owner.

use alloc::vec;

use super::{check_local_shard, expect_block, q_meta, record, row_count, WorkerBackward, WorkerForward};
use crate::attention::{
    attention_delta, blockwise_attention, blockwise_attention_backward, merge_states, AttentionState, GradientBundle,
    KernelOptions,
};
use crate::comm::{ring_shift, ring_start, Communicator, Message};
use crate::error::Result;
use crate::shard::ShardSpec;
use crate::tensor::Tensor;
use crate::volume::{
    backward_flops, forward_flops, RoundKind, RoundVolume, LVX_BACKWARD_EPILOGUE, LVX_BACKWARD_LOOP,
    LVX_FORWARD_EPILOGUE, LVX_FORWARD_LOOP,
};

pub fn lvx_forward<C: Communicator + ?Sized>(
    comm: &mut C,
    shards: &ShardSpec,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    opts: &KernelOptions,
) -> Result<WorkerForward> {
    check_local_shard(comm, shards, q, k, v)?;
    let (n, i) = (comm.size(), comm.rank());
    let remote = n > 1;
    let (heads, head_dim, dv) = (q.shape()[0], q.shape()[2], v.shape()[2]);
    let succ = (i + 1) % n;

    let mut outgoing = AttentionState::empty(q.dtype(), heads, shards.q_rows(succ), dv);
    let mut q_cur = q.clone();
    let mut trace = vec::Vec::with_capacity(n + 1);

    for r in 0..n {
        let j = (i + n - r) % n;
        let j_next = (j + n - 1) % n;
        let mut round = RoundVolume::new(RoundKind::Loop);
        round.flops = forward_flops(row_count(&q_cur), row_count(k), heads, head_dim);

        let msg = Message::with_meta(q_meta(shards, j), vec![outgoing.o, outgoing.l, q_cur.clone()]);
        record(&mut round, &msg, &LVX_FORWARD_LOOP, remote);
        let pending = ring_start(comm, msg)?;

        let partial = blockwise_attention(&q_cur, k, v, opts)?;

        let received = pending.finish(comm)?;
        expect_block(&received, q_meta(shards, j_next), 3)?;
        let mut tensors = received.tensors.into_iter();
        let (o_j, l_j, q_next) = (tensors.next().unwrap(), tensors.next().unwrap(), tensors.next().unwrap());
        let held = AttentionState { o: o_j, l: l_j };
        if held.rows() != partial.rows() {
            return Err(crate::Error::ShardMetadata(alloc::format!(
                "received {} output rows for block {}, expected {}",
                held.rows(),
                j,
                partial.rows()
            )));
        }
        outgoing = merge_states(&held, &partial)?;
        q_cur = q_next;
        trace.push(round);
    }

    // outgoing now holds block i + 1
    let mut epilogue = RoundVolume::new(RoundKind::Epilogue);
    let msg = Message::with_meta(q_meta(shards, succ), vec![outgoing.o, outgoing.l]);
    record(&mut epilogue, &msg, &LVX_FORWARD_EPILOGUE, remote);
    let received = ring_shift(comm, msg)?;
    expect_block(&received, q_meta(shards, i), 2)?;
    let mut tensors = received.tensors.into_iter();
    let state = AttentionState { o: tensors.next().unwrap(), l: tensors.next().unwrap() };
    trace.push(epilogue);
    Ok(WorkerForward { state, trace })
}

/// Rotates `{dQ_{j+1}, Q_j, dO_j, L_j, D_j}`; `dK_i, dV_i` accumulate locally.
#[allow(clippy::too_many_arguments)]
pub fn lvx_backward<C: Communicator + ?Sized>(
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
    let (n, i) = (comm.size(), comm.rank());
    let remote = n > 1;
    let (heads, head_dim) = (q.shape()[0], q.shape()[2]);
    let succ = (i + 1) % n;

    let delta = attention_delta(&state.o, d_o)?;
    let mut cur = [q.clone(), d_o.clone(), state.l.clone(), delta];
    let mut outgoing_dq = Tensor::zeros(q.dtype(), &[heads, shards.q_rows(succ), head_dim])?;
    let mut local = GradientBundle::zeros_like(q, k, v);
    let mut trace = vec::Vec::with_capacity(n + 1);

    for r in 0..n {
        let j = (i + n - r) % n;
        let j_next = (j + n - 1) % n;
        let mut round = RoundVolume::new(RoundKind::Loop);
        round.flops = backward_flops(row_count(&cur[0]), row_count(k), heads, head_dim);

        let [cq, cdo, cl, cd] = &cur;
        let msg = Message::with_meta(
            q_meta(shards, j),
            vec![outgoing_dq, cq.clone(), cdo.clone(), cl.clone(), cd.clone()],
        );
        record(&mut round, &msg, &LVX_BACKWARD_LOOP, remote);
        let pending = ring_start(comm, msg)?;

        let g = blockwise_attention_backward(cq, k, v, cl, cd, cdo, opts.scale)?;
        local.dk = local.dk.add(&g.dk)?;
        local.dv = local.dv.add(&g.dv)?;

        let received = pending.finish(comm)?;
        expect_block(&received, q_meta(shards, j_next), 5)?;
        let mut tensors = received.tensors.into_iter();
        let dq_j = tensors.next().unwrap();
        outgoing_dq = dq_j.add(&g.dq)?;
        cur = [tensors.next().unwrap(), tensors.next().unwrap(), tensors.next().unwrap(), tensors.next().unwrap()];
        trace.push(round);
    }

    let mut epilogue = RoundVolume::new(RoundKind::Epilogue);
    let msg = Message::with_meta(q_meta(shards, succ), vec![outgoing_dq]);
    record(&mut epilogue, &msg, &LVX_BACKWARD_EPILOGUE, remote);
    let received = ring_shift(comm, msg)?;
    expect_block(&received, q_meta(shards, i), 1)?;
    local.dq = received.tensors.into_iter().next().unwrap();
    trace.push(epilogue);
    Ok(WorkerBackward { grads: local, trace })
}
