use lvx::driver::{run_distributed, AttentionInputs, RunOptions};
use lvx_core::attention::{dense_attention, dense_attention_backward, default_scale};
use lvx_core::strategy::StrategyKind;
use lvx_core::volume::{self, Geometry, Phase};
use lvx_core::DType;
use proptest::prelude::*;

fn geometry(s_q: usize, s_kv: usize, h: usize, d: usize, n: usize) -> Geometry {
    lvx_core::analytics::WorkloadSpec {
        s_q: s_q as u64,
        s_kv: s_kv as u64,
        heads: h as u64,
        head_dim: d as u64,
        workers: n as u64,
        elem_bytes: 8,
    }
    .geometry()
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotations_are_exact_and_counted(
        seed in any::<u64>(),
        ring in any::<bool>(),
        n in 1usize..6,
        h in 1usize..3,
        s_q in 1usize..14,
        s_kv in 1usize..20,
        d in 1usize..5,
    ) {
        let kind = if ring { StrategyKind::RingAttention } else { StrategyKind::LvXAttn };
        let inputs = AttentionInputs::generate(s_q, s_kv, h, d, DType::F64, seed).unwrap();
        let mut opts = RunOptions::new(kind, n, d);
        opts.backward = true;
        let run = run_distributed(&inputs, &opts).unwrap();

        let scale = default_scale(d);
        let dense = dense_attention(&inputs.q, &inputs.k, &inputs.v, scale).unwrap();
        prop_assert!(run.state.o.max_abs_diff(&dense.o) <= 1e-12);
        prop_assert!(run.state.l.max_abs_diff(&dense.l) <= 1e-12);
        let grads = dense_attention_backward(&inputs.q, &inputs.k, &inputs.v, &dense.o, &dense.l, &inputs.d_o, scale).unwrap();
        let got = run.grads.unwrap();
        prop_assert!(got.dq.max_abs_diff(&grads.dq) <= 1e-12 * grads.dq.max_abs().max(1.0));
        prop_assert!(got.dk.max_abs_diff(&grads.dk) <= 1e-12 * grads.dk.max_abs().max(1.0));
        prop_assert!(got.dv.max_abs_diff(&grads.dv) <= 1e-12 * grads.dv.max_abs().max(1.0));

        let g = geometry(s_q, s_kv, h, d, n);
        for w in 0..n {
            prop_assert_eq!(run.forward_stats.bytes_from(w), volume::worker_bytes(kind, Phase::Forward, &g, w));
            prop_assert_eq!(run.backward_stats.as_ref().unwrap().bytes_from(w), volume::worker_bytes(kind, Phase::Backward, &g, w));
        }
        prop_assert_eq!(run.forward.total_bytes, volume::total_bytes(kind, Phase::Forward, &g));
    }
}

#[test]
fn head_parallel_needs_divisible_heads() {
    let inputs = AttentionInputs::generate(4, 6, 4, 2, DType::F64, 1).unwrap();
    let r = run_distributed(&inputs, &RunOptions::new(StrategyKind::HeadParallel, 3, 2));
    assert!(matches!(r, Err(lvx::Error::Core(lvx_core::Error::HeadsNotDivisible { .. }))), "{:?}", r.err());
    let ok = run_distributed(&inputs, &RunOptions::new(StrategyKind::HeadParallel, 2, 2)).unwrap();
    let dense = dense_attention(&inputs.q, &inputs.k, &inputs.v, default_scale(2)).unwrap();
    assert!(ok.state.o.max_abs_diff(&dense.o) <= 1e-12);
}

#[test]
fn single_worker_sends_nothing() {
    let inputs = AttentionInputs::generate(5, 7, 2, 3, DType::F32, 9).unwrap();
    for kind in [StrategyKind::LvXAttn, StrategyKind::RingAttention] {
        let mut opts = RunOptions::new(kind, 1, 3);
        opts.backward = true;
        let run = run_distributed(&inputs, &opts).unwrap();
        assert_eq!(run.forward_stats.total_bytes(), 0);
        assert_eq!(run.backward_stats.unwrap().total_bytes(), 0);
    }
}
