//! What each protocol puts on the wire, round by round.
//!
//! The message-class tables below are the single source for both the
//! protocols (which assemble messages in this order) and the closed-form
//! volume model (which predicts the transport byte counters). Only bytes sent
//! to a different worker count; loopback traffic is free, so every
//! prediction is zero when `n = 1`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign, Index};

use crate::shard::ShardSpec;
use crate::strategy::StrategyKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MessageClass {
    Q,
    O,
    L,
    K,
    V,
    DO,
    D,
    DQ,
    DK,
    DV,
}

impl MessageClass {
    pub const ALL: [MessageClass; 10] = [
        MessageClass::Q,
        MessageClass::O,
        MessageClass::L,
        MessageClass::K,
        MessageClass::V,
        MessageClass::DO,
        MessageClass::D,
        MessageClass::DQ,
        MessageClass::DK,
        MessageClass::DV,
    ];

    /// Elements per sequence row across all heads.
    pub const fn row_elems(self, heads: usize, head_dim: usize) -> usize {
        match self {
            MessageClass::L | MessageClass::D => heads,
            _ => heads * head_dim,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            MessageClass::Q => "q",
            MessageClass::O => "o",
            MessageClass::L => "l",
            MessageClass::K => "k",
            MessageClass::V => "v",
            MessageClass::DO => "do",
            MessageClass::D => "d",
            MessageClass::DQ => "dq",
            MessageClass::DK => "dk",
            MessageClass::DV => "dv",
        }
    }

    const fn index(self) -> usize {
        self as usize
    }
}

use MessageClass::*;

/// LV-XAttn forward loop message: previous block's output and statistics, current query.
pub const LVX_FORWARD_LOOP: [MessageClass; 3] = [O, L, Q];
pub const LVX_FORWARD_EPILOGUE: [MessageClass; 2] = [O, L];
/// LV-XAttn backward loop message: previous block's dQ accumulator, then the current block's inputs.
pub const LVX_BACKWARD_LOOP: [MessageClass; 5] = [DQ, Q, DO, L, D];
pub const LVX_BACKWARD_EPILOGUE: [MessageClass; 1] = [DQ];
pub const RING_FORWARD: [MessageClass; 2] = [K, V];
pub const RING_BACKWARD_KV: [MessageClass; 2] = [K, V];
pub const RING_BACKWARD_GRADS: [MessageClass; 2] = [DK, DV];
pub const HEAD_FORWARD_Q: [MessageClass; 1] = [Q];
pub const HEAD_FORWARD_KV: [MessageClass; 2] = [K, V];
pub const HEAD_FORWARD_OUT: [MessageClass; 2] = [O, L];
pub const HEAD_BACKWARD_Q: [MessageClass; 4] = [Q, DO, L, D];
pub const HEAD_BACKWARD_KV: [MessageClass; 2] = [K, V];
pub const HEAD_BACKWARD_OUT_Q: [MessageClass; 1] = [DQ];
pub const HEAD_BACKWARD_OUT_KV: [MessageClass; 2] = [DK, DV];

/// Payload bytes per message class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassBytes([u64; 10]);

impl ClassBytes {
    pub fn add_class(&mut self, class: MessageClass, bytes: u64) {
        self.0[class.index()] += bytes;
    }

    /// Adds `rows` rows of every class in `classes`.
    pub fn add_rows(&mut self, classes: &[MessageClass], rows: usize, heads: usize, head_dim: usize, elem_bytes: usize) {
        for &c in classes {
            self.add_class(c, (rows * c.row_elems(heads, head_dim) * elem_bytes) as u64);
        }
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MessageClass, u64)> + '_ {
        MessageClass::ALL.iter().map(move |&c| (c, self.0[c.index()]))
    }
}

impl Index<MessageClass> for ClassBytes {
    type Output = u64;
    fn index(&self, c: MessageClass) -> &u64 {
        &self.0[c.index()]
    }
}

impl AddAssign for ClassBytes {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl Add for ClassBytes {
    type Output = ClassBytes;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RoundKind {
    /// Compute overlapped with a rotation.
    Loop,
    /// Final hop returning results to their owner.
    Epilogue,
    /// All-to-all redistribution (head parallelism).
    Exchange,
    /// Local attention with no communication.
    Compute,
}

/// One round of one worker: what it sent and how much attention arithmetic it did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundVolume {
    pub kind: RoundKind,
    pub bytes: ClassBytes,
    pub flops: u64,
}

impl RoundVolume {
    pub fn new(kind: RoundKind) -> Self {
        Self { kind, bytes: ClassBytes::default(), flops: 0 }
    }
}

/// Forward attention FLOPs for `q_rows × kv_rows` per head.
pub const fn forward_flops(q_rows: usize, kv_rows: usize, heads: usize, head_dim: usize) -> u64 {
    4 * (q_rows * kv_rows * heads * head_dim) as u64
}

pub const fn backward_flops(q_rows: usize, kv_rows: usize, heads: usize, head_dim: usize) -> u64 {
    10 * (q_rows * kv_rows * heads * head_dim) as u64
}

/// Geometry of one distributed attention problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub shards: ShardSpec,
    pub heads: usize,
    pub head_dim: usize,
    pub elem_bytes: usize,
}

impl Geometry {
    fn workers(&self) -> usize {
        self.shards.workers()
    }

    fn q(&self, block: usize) -> usize {
        self.shards.q_rows(block % self.workers())
    }

    fn kv(&self, block: usize) -> usize {
        self.shards.kv_rows(block % self.workers())
    }

    fn add(&self, bytes: &mut ClassBytes, classes: &[MessageClass], rows: usize) {
        bytes.add_rows(classes, rows, self.heads, self.head_dim, self.elem_bytes);
    }
}

/// Predicted per-round schedule of `worker`.
pub fn worker_schedule(kind: StrategyKind, phase: Phase, g: &Geometry, worker: usize) -> Vec<RoundVolume> {
    let n = g.workers();
    let i = worker;
    let (h, d) = (g.heads, g.head_dim);
    let remote = n > 1;
    // block processed by worker i in round r, offset so indices stay non-negative
    let blk = |r: usize, off: isize| ((i + n * 2) as isize - r as isize + off) as usize % n;
    let flops = match phase {
        Phase::Forward => forward_flops,
        Phase::Backward => backward_flops,
    };
    let mut rounds = Vec::new();
    match kind {
        StrategyKind::SingleWorker => {
            let mut r = RoundVolume::new(RoundKind::Compute);
            r.flops = flops(g.q(0), g.kv(0), h, d);
            rounds.push(r);
        }
        StrategyKind::LvXAttn => {
            for r in 0..n {
                let mut rv = RoundVolume::new(RoundKind::Loop);
                rv.flops = flops(g.q(blk(r, 0)), g.kv(i), h, d);
                if remote {
                    match phase {
                        Phase::Forward => {
                            g.add(&mut rv.bytes, &[O, L], g.q(blk(r, 1)));
                            g.add(&mut rv.bytes, &[Q], g.q(blk(r, 0)));
                        }
                        Phase::Backward => {
                            g.add(&mut rv.bytes, &[DQ], g.q(blk(r, 1)));
                            g.add(&mut rv.bytes, &[Q, DO, L, D], g.q(blk(r, 0)));
                        }
                    }
                }
                rounds.push(rv);
            }
            let mut ep = RoundVolume::new(RoundKind::Epilogue);
            if remote {
                let classes: &[MessageClass] = match phase {
                    Phase::Forward => &LVX_FORWARD_EPILOGUE,
                    Phase::Backward => &LVX_BACKWARD_EPILOGUE,
                };
                g.add(&mut ep.bytes, classes, g.q(i + 1));
            }
            rounds.push(ep);
        }
        StrategyKind::RingAttention => {
            for r in 0..n {
                let mut rv = RoundVolume::new(RoundKind::Loop);
                let held = blk(r, 0);
                rv.flops = flops(g.q(i), g.kv(held), h, d);
                if remote {
                    if r + 1 < n {
                        g.add(&mut rv.bytes, &RING_FORWARD, g.kv(held));
                    }
                    if phase == Phase::Backward {
                        g.add(&mut rv.bytes, &RING_BACKWARD_GRADS, g.kv(held));
                    }
                }
                rounds.push(rv);
            }
        }
        StrategyKind::HeadParallel => {
            let group = h / n;
            let others = (0..n).filter(|&k| k != i);
            let mut scatter = RoundVolume::new(RoundKind::Exchange);
            let mut gather = RoundVolume::new(RoundKind::Exchange);
            let s_q: usize = (0..n).map(|k| g.q(k)).sum();
            let s_kv: usize = (0..n).map(|k| g.kv(k)).sum();
            scatter.flops = flops(s_q, s_kv, group, d);
            let (q_in, kv_in, q_out, kv_out): (&[MessageClass], &[MessageClass], &[MessageClass], &[MessageClass]) =
                match phase {
                    Phase::Forward => (&HEAD_FORWARD_Q, &HEAD_FORWARD_KV, &HEAD_FORWARD_OUT, &[]),
                    Phase::Backward => (&HEAD_BACKWARD_Q, &HEAD_BACKWARD_KV, &HEAD_BACKWARD_OUT_Q, &HEAD_BACKWARD_OUT_KV),
                };
            for k in others {
                scatter.bytes.add_rows(q_in, g.q(i), group, d, g.elem_bytes);
                scatter.bytes.add_rows(kv_in, g.kv(i), group, d, g.elem_bytes);
                gather.bytes.add_rows(q_out, g.q(k), group, d, g.elem_bytes);
                gather.bytes.add_rows(kv_out, g.kv(k), group, d, g.elem_bytes);
            }
            rounds.push(scatter);
            rounds.push(gather);
        }
    }
    rounds
}

/// Predicted payload bytes sent by `worker` during one phase.
pub fn worker_bytes(kind: StrategyKind, phase: Phase, g: &Geometry, worker: usize) -> u64 {
    worker_schedule(kind, phase, g, worker).iter().map(|r| r.bytes.total()).sum()
}

/// Predicted payload bytes summed over every worker.
pub fn total_bytes(kind: StrategyKind, phase: Phase, g: &Geometry) -> u64 {
    (0..g.workers()).map(|w| worker_bytes(kind, phase, g, w)).sum()
}

/// Per-round bytes summed over workers, for rounds of the given kind.
pub fn cluster_round_bytes(kind: StrategyKind, phase: Phase, g: &Geometry, round_kind: RoundKind) -> Vec<u64> {
    let per_worker: Vec<Vec<RoundVolume>> = (0..g.workers()).map(|w| worker_schedule(kind, phase, g, w)).collect();
    let rounds = per_worker.first().map_or(0, Vec::len);
    let mut out = vec![];
    for r in 0..rounds {
        if per_worker[0][r].kind != round_kind {
            continue;
        }
        out.push(per_worker.iter().map(|w| w[r].bytes.total()).sum());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(s_q: usize, s_kv: usize, n: usize, h: usize, d: usize, b: usize) -> Geometry {
        Geometry { shards: ShardSpec::balanced(s_q, s_kv, n).unwrap(), heads: h, head_dim: d, elem_bytes: b }
    }

    #[test]
    fn lvx_forward_matches_even_shard_closed_form() {
        // per worker: n·(2·|q|·h·d + |q|·h)·b + (|q|·h·d + |q|·h)·b
        let g = geom(8, 12, 4, 2, 3, 4);
        let q = 2;
        let expected = 4 * (2 * q * 2 * 3 + q * 2) * 4 + (q * 2 * 3 + q * 2) * 4;
        for w in 0..4 {
            assert_eq!(worker_bytes(StrategyKind::LvXAttn, Phase::Forward, &g, w), expected as u64);
        }
    }

    #[test]
    fn ring_forward_matches_closed_form() {
        // per worker: (n−1)·2·|kv|·h·d·b
        let g = geom(8, 12, 4, 2, 3, 8);
        for w in 0..4 {
            assert_eq!(worker_bytes(StrategyKind::RingAttention, Phase::Forward, &g, w), (3 * 2 * 3 * 6 * 8) as u64);
        }
    }

    #[test]
    fn backward_closed_forms() {
        let g = geom(8, 12, 4, 2, 3, 4);
        let (hd, h, q, kv) = (6, 2, 2, 3);
        let lvx = 4 * q * (3 * hd + 2 * h) * 4 + q * hd * 4;
        let ring = 3 * kv * 2 * hd * 4 + 4 * kv * 2 * hd * 4;
        assert_eq!(worker_bytes(StrategyKind::LvXAttn, Phase::Backward, &g, 1), lvx as u64);
        assert_eq!(worker_bytes(StrategyKind::RingAttention, Phase::Backward, &g, 1), ring as u64);
    }

    #[test]
    fn single_worker_sends_nothing() {
        for kind in [StrategyKind::LvXAttn, StrategyKind::RingAttention, StrategyKind::HeadParallel, StrategyKind::SingleWorker] {
            for phase in [Phase::Forward, Phase::Backward] {
                assert_eq!(total_bytes(kind, phase, &geom(5, 7, 1, 2, 3, 8)), 0);
            }
        }
    }

    #[test]
    fn per_round_totals_are_uniform() {
        let g = geom(5, 7, 3, 2, 4, 8);
        let lvx = cluster_round_bytes(StrategyKind::LvXAttn, Phase::Forward, &g, RoundKind::Loop);
        assert_eq!(lvx, vec![(5 * (2 * 8 + 2) * 8) as u64; 3]);
        let ring = cluster_round_bytes(StrategyKind::RingAttention, Phase::Forward, &g, RoundKind::Loop);
        assert_eq!(ring, vec![(7 * 2 * 8 * 8) as u64, (7 * 2 * 8 * 8) as u64, 0]);
    }

    #[test]
    fn head_parallel_even_split() {
        // h=4, n=2, S_Q=S_KV=8: each worker ships 2 heads × 4 rows of Q,K,V and gets O,L back
        let g = geom(8, 8, 2, 4, 3, 4);
        let fwd = 2 * 4 * (3 + 2 * 3) * 4 + 2 * 4 * (3 + 1) * 4;
        assert_eq!(worker_bytes(StrategyKind::HeadParallel, Phase::Forward, &g, 0), fwd as u64);
    }
}
