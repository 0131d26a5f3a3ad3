//! Key-value rotation baseline.
//!
//! Forward: `Q_i, O_i, L_i` stay resident while `K, V` blocks make `n - 1`
//! hops. Backward: `K, V` make `n - 1` hops and their `dK, dV` accumulators
//! travel with them, one extra hop bringing the accumulators home.

use alloc::vec;

use super::{check_local_shard, expect_block, kv_meta, record, row_count, WorkerBackward, WorkerForward};
use crate::attention::{
    attention_delta, blockwise_attention, blockwise_attention_backward, merge_states, AttentionState, GradientBundle,
    KernelOptions,
};
use crate::comm::{ring_start, Communicator, Message};
use crate::error::Result;
use crate::shard::ShardSpec;
use crate::tensor::Tensor;
use crate::volume::{backward_flops, forward_flops, RoundKind, RoundVolume, RING_BACKWARD_GRADS, RING_BACKWARD_KV, RING_FORWARD};

fn take2(msg: Message) -> (Tensor, Tensor) {
    let mut t = msg.tensors.into_iter();
    (t.next().unwrap(), t.next().unwrap())
}

pub fn ring_forward<C: Communicator + ?Sized>(
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

    let mut state = AttentionState::empty(q.dtype(), heads, row_count(q), dv);
    let (mut k_cur, mut v_cur) = (k.clone(), v.clone());
    let mut trace = vec::Vec::with_capacity(n);

    for r in 0..n {
        let held = (i + n - r) % n;
        let mut round = RoundVolume::new(RoundKind::Loop);
        round.flops = forward_flops(row_count(q), row_count(&k_cur), heads, head_dim);

        let pending = if r + 1 < n {
            let msg = Message::with_meta(kv_meta(shards, held), vec![k_cur.clone(), v_cur.clone()]);
            record(&mut round, &msg, &RING_FORWARD, remote);
            Some(ring_start(comm, msg)?)
        } else {
            None
        };

        let partial = blockwise_attention(q, &k_cur, &v_cur, opts)?;
        state = merge_states(&state, &partial)?;

        if let Some(p) = pending {
            let received = p.finish(comm)?;
            expect_block(&received, kv_meta(shards, (held + n - 1) % n), 2)?;
            (k_cur, v_cur) = take2(received);
        }
        trace.push(round);
    }
    Ok(WorkerForward { state, trace })
}

#[allow(clippy::too_many_arguments)]
pub fn ring_backward<C: Communicator + ?Sized>(
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

    let delta = attention_delta(&state.o, d_o)?;
    let mut dq = Tensor::zeros(q.dtype(), q.shape())?;
    let (mut k_cur, mut v_cur) = (k.clone(), v.clone());
    let zero = GradientBundle::zeros_like(q, k, v);
    let (mut dk_cur, mut dv_cur) = (zero.dk, zero.dv);
    let mut trace = vec::Vec::with_capacity(n);

    for r in 0..n {
        let held = (i + n - r) % n;
        let prev = (held + n - 1) % n;
        let mut round = RoundVolume::new(RoundKind::Loop);
        round.flops = backward_flops(row_count(q), row_count(&k_cur), heads, head_dim);

        let kv_pending = if r + 1 < n {
            let msg = Message::with_meta(kv_meta(shards, held), vec![k_cur.clone(), v_cur.clone()]);
            record(&mut round, &msg, &RING_BACKWARD_KV, remote);
            Some(ring_start(comm, msg)?)
        } else {
            None
        };

        let g = blockwise_attention_backward(q, &k_cur, &v_cur, &state.l, &delta, d_o, opts.scale)?;
        dq = dq.add(&g.dq)?;
        let msg = Message::with_meta(kv_meta(shards, held), vec![dk_cur.add(&g.dk)?, dv_cur.add(&g.dv)?]);
        record(&mut round, &msg, &RING_BACKWARD_GRADS, remote);
        let grads_pending = ring_start(comm, msg)?;

        if let Some(p) = kv_pending {
            let received = p.finish(comm)?;
            expect_block(&received, kv_meta(shards, prev), 2)?;
            (k_cur, v_cur) = take2(received);
        }
        let received = grads_pending.finish(comm)?;
        expect_block(&received, kv_meta(shards, prev), 2)?;
        (dk_cur, dv_cur) = take2(received);
        trace.push(round);
    }
    // after the last hop the accumulators of block i are home
    Ok(WorkerBackward { grads: GradientBundle { dq, dk: dk_cur, dv: dv_cur }, trace })
}
