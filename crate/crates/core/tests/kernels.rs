use lvx_core::attention::{
    attention_delta,
    blockwise_attention, blockwise_attention_backward, dense_attention, dense_attention_backward, merge_states,
    AttentionState, KernelOptions,
};
use lvx_core::comm::SoloComm;
use lvx_core::rng::{seeded_random_tensor_stream, Seed};
use lvx_core::strategy::{self, StrategyKind};
use lvx_core::{DType, ShardSpec, Tensor};
use proptest::prelude::*;

fn operands(seed: u64, h: usize, s_q: usize, s_kv: usize, d: usize) -> (Tensor, Tensor, Tensor, Tensor) {
    let t = |stream, rows| seeded_random_tensor_stream(Seed(seed), stream, &[h, rows, d], DType::F64, 1.0).unwrap();
    (t(1, s_q), t(2, s_kv), t(3, s_kv), t(4, s_q))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blockwise_matches_dense(seed in any::<u64>(), h in 1usize..4, s_q in 1usize..12, s_kv in 1usize..20, d in 1usize..6, tile in 1usize..25) {
        let (q, k, v, d_o) = operands(seed, h, s_q, s_kv, d);
        let opts = KernelOptions { scale: 0.7, tile };
        let dense = dense_attention(&q, &k, &v, opts.scale).unwrap();
        let tiled = blockwise_attention(&q, &k, &v, &opts).unwrap();
        prop_assert!(dense.o.max_abs_diff(&tiled.o) <= 1e-13);
        prop_assert!(dense.l.max_abs_diff(&tiled.l) <= 1e-13);

        let g_dense = dense_attention_backward(&q, &k, &v, &dense.o, &dense.l, &d_o, opts.scale).unwrap();
        // per key-value block gradients, dQ summed over blocks
        let delta = attention_delta(&tiled.o, &d_o).unwrap();
        let cut = s_kv / 2;
        let mut dq: Option<Tensor> = None;
        let mut dks = Vec::new();
        let mut dvs = Vec::new();
        for r in [0..cut, cut..s_kv] {
            if r.is_empty() {
                continue;
            }
            let ks = k.slice_axis(1, r.clone()).unwrap();
            let vs = v.slice_axis(1, r).unwrap();
            let g = blockwise_attention_backward(&q, &ks, &vs, &tiled.l, &delta, &d_o, opts.scale).unwrap();
            dq = Some(match dq { Some(acc) => acc.add(&g.dq).unwrap(), None => g.dq });
            dks.push(g.dk);
            dvs.push(g.dv);
        }
        prop_assert!(g_dense.dq.max_abs_diff(&dq.unwrap()) <= 1e-12);
        prop_assert!(g_dense.dk.max_abs_diff(&Tensor::concat(1, &dks).unwrap()) <= 1e-12);
        prop_assert!(g_dense.dv.max_abs_diff(&Tensor::concat(1, &dvs).unwrap()) <= 1e-12);
    }

    #[test]
    fn merge_is_order_invariant(seed in any::<u64>(), splits in prop::collection::vec(1usize..5, 1..5), reversed in any::<bool>()) {
        let s_kv: usize = splits.iter().sum();
        let (q, k, v, _) = operands(seed, 2, 5, s_kv, 3);
        let opts = KernelOptions::for_head_dim(3);
        let mut parts = Vec::new();
        let mut start = 0;
        for len in &splits {
            let ks = k.slice_axis(1, start..start + len).unwrap();
            let vs = v.slice_axis(1, start..start + len).unwrap();
            parts.push(blockwise_attention(&q, &ks, &vs, &opts).unwrap());
            start += len;
        }
        if reversed {
            parts.reverse();
        }
        let mut acc = AttentionState::empty(DType::F64, 2, 5, 3);
        for p in &parts {
            acc = merge_states(&acc, p).unwrap();
        }
        let whole = dense_attention(&q, &k, &v, opts.scale).unwrap();
        prop_assert!(acc.o.max_abs_diff(&whole.o) <= 1e-13);
        prop_assert!(acc.l.max_abs_diff(&whole.l) <= 1e-13);
    }
}

#[test]
fn empty_state_is_identity() {
    let (q, k, v, _) = operands(3, 1, 4, 6, 2);
    let s = dense_attention(&q, &k, &v, 0.5).unwrap();
    let e = AttentionState::empty(DType::F64, 1, 4, 2);
    assert!(merge_states(&e, &s).unwrap().o.bit_eq(&s.o));
    assert!(merge_states(&s, &e).unwrap().l.bit_eq(&s.l));
}

#[test]
fn single_worker_protocols_agree_with_dense() {
    let (q, k, v, d_o) = operands(11, 2, 6, 9, 4);
    let opts = KernelOptions::for_head_dim(4);
    let shards = ShardSpec::balanced(6, 9, 1).unwrap();
    let dense = dense_attention(&q, &k, &v, opts.scale).unwrap();
    for kind in StrategyKind::ALL {
        let mut comm = SoloComm::new();
        let fwd = strategy::forward(kind, &mut comm, &shards, &q, &k, &v, &opts).unwrap();
        assert!(fwd.state.o.max_abs_diff(&dense.o) <= 1e-12, "{:?}", kind);
        let bwd = strategy::backward(kind, &mut comm, &shards, &q, &k, &v, &fwd.state, &d_o, &opts).unwrap();
        let reference = dense_attention_backward(&q, &k, &v, &dense.o, &dense.l, &d_o, opts.scale).unwrap();
        assert!(bwd.grads.dq.max_abs_diff(&reference.dq) <= 1e-12, "{:?}", kind);
        assert!(bwd.grads.dv.max_abs_diff(&reference.dv) <= 1e-12, "{:?}", kind);
    }
}
