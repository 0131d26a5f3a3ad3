use lvx_core::analytics::{
    classify_regime, log_grid, round_times, speedup, sweep, table_speedup, HardwareSpec, Preset, Quadrant, WorkloadSpec,
};
use proptest::prelude::*;

fn base() -> WorkloadSpec {
    Preset::VideoMmeLlama3v.workload(2)
}

#[test]
fn speedup_falls_with_query_length_in_top_left() {
    let hw = HardwareSpec::A100_25GBPS;
    let sq = log_grid(1e3, 1e6, 20).unwrap();
    let skv = log_grid(1e5, 1e8, 20).unwrap();
    let rows = sweep(&sq, &skv, &base(), &hw).unwrap();
    assert_eq!(rows.len(), 400);
    let mut pairs = 0;
    for j in 0..skv.len() {
        for i in 1..sq.len() {
            let (a, b) = (&rows[(i - 1) * skv.len() + j], &rows[i * skv.len() + j]);
            assert_eq!(a.s_kv, b.s_kv);
            if a.quadrant == Quadrant::TopLeft && b.quadrant == Quadrant::TopLeft {
                pairs += 1;
                assert!(b.speedup_fwd < a.speedup_fwd);
                assert!(b.speedup_bwd < a.speedup_bwd);
            }
        }
    }
    assert!(pairs > 50);
}

#[test]
fn video_mme_is_top_left() {
    let r = classify_regime(&base(), &HardwareSpec::A100_25GBPS);
    assert_eq!(r.quadrant, Quadrant::TopLeft);
    assert!(r.speedup_forward > 1.0 && r.speedup_backward > 1.0);
}

proptest! {
    #[test]
    fn closed_form_agrees_in_top_left(s_q in 64u64..20_000, s_kv in 1_000_000u64..50_000_000, n in prop::sample::select(vec![2u64, 4, 8, 16])) {
        let w = WorkloadSpec { s_q, s_kv, workers: n, ..base() };
        let hw = HardwareSpec::A100_25GBPS;
        let r = classify_regime(&w, &hw);
        prop_assume!(r.quadrant == Quadrant::TopLeft);
        let exact = speedup(&w, &hw);
        let closed = table_speedup(&w, &hw);
        prop_assert!(((exact.forward - closed.forward) / closed.forward).abs() <= 1e-12);
        prop_assert!(((exact.backward - closed.backward) / closed.backward).abs() <= 1e-12);
    }

    #[test]
    fn single_worker_has_no_communication(s_q in 1u64..100_000, s_kv in 1u64..100_000_000) {
        let w = WorkloadSpec { s_q, s_kv, workers: 1, ..base() };
        let t = round_times(&w, &HardwareSpec::A100_25GBPS);
        prop_assert_eq!(t.lvx.comm_fwd, 0.0);
        prop_assert_eq!(t.ring.comm_bwd, 0.0);
    }
}
