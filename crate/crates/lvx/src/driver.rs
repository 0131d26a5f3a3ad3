//! Scatter, run a protocol on a cluster, gather.

use std::collections::BTreeMap;

use lvx_core::analytics::{self, HardwareSpec, WorkloadSpec};
use lvx_core::attention::{AttentionState, GradientBundle, KernelOptions};
use lvx_core::comm::Communicator;
use lvx_core::rng::{seeded_random_tensor_stream, Seed};
use lvx_core::strategy::{self, StrategyKind};
use lvx_core::volume::{self, ClassBytes, Geometry, Phase, RoundKind, RoundVolume};
use lvx_core::{DType, ShardSpec, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{spawn_cluster, ClusterOptions, Transport, TransportStats};

/// Full (unsharded) `[h, S, d]` operands.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub d_o: Tensor,
}

impl AttentionInputs {
    /// Q, K, V and dO from keystreams 1 to 4 of `seed`, uniform in `[-1, 1)`.
    pub fn generate(s_q: usize, s_kv: usize, heads: usize, head_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        let t = |stream, rows| seeded_random_tensor_stream(Seed(seed), stream, &[heads, rows, head_dim], dtype, 1.0);
        Ok(AttentionInputs { q: t(1, s_q)?, k: t(2, s_kv)?, v: t(3, s_kv)?, d_o: t(4, s_q)? })
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn s_q(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn s_kv(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub kind: StrategyKind,
    pub workers: usize,
    pub cluster: ClusterOptions,
    pub kernel: KernelOptions,
    pub backward: bool,
    /// Used only to model compute time in the round log.
    pub hardware: HardwareSpec,
}

impl RunOptions {
    pub fn new(kind: StrategyKind, workers: usize, head_dim: usize) -> Self {
        RunOptions {
            kind,
            workers,
            cluster: ClusterOptions::default(),
            kernel: KernelOptions::for_head_dim(head_dim),
            backward: false,
            hardware: HardwareSpec::A100_25GBPS,
        }
    }
}

pub fn bytes_by_class(bytes: &ClassBytes) -> BTreeMap<String, u64> {
    bytes.iter().filter(|(_, b)| *b > 0).map(|(c, b)| (c.name().to_string(), b)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub worker: usize,
    pub round: usize,
    pub kind: RoundKind,
    pub bytes: BTreeMap<String, u64>,
    pub bytes_total: u64,
    pub flops: u64,
    pub modeled_comm_seconds: f64,
    pub modeled_compute_seconds: f64,
}

fn round_records(worker: usize, trace: &[RoundVolume], transport: &Transport, hw: &HardwareSpec) -> Vec<RoundRecord> {
    trace
        .iter()
        .enumerate()
        .map(|(round, rv)| {
            let total = rv.bytes.total();
            RoundRecord {
                worker,
                round,
                kind: rv.kind,
                bytes: bytes_by_class(&rv.bytes),
                bytes_total: total,
                flops: rv.flops,
                modeled_comm_seconds: if total > 0 { transport.message_time(total) } else { 0.0 },
                modeled_compute_seconds: rv.flops as f64 / hw.gpu_flops,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub total_bytes: u64,
    pub bytes_by_class: BTreeMap<String, u64>,
    pub rounds: Vec<RoundRecord>,
    /// Measured counters; absent for predictions.
    pub transport: Option<TransportStats>,
    pub wall_seconds: Option<f64>,
}

fn phase_report(
    phase: Phase,
    traces: &[Vec<RoundVolume>],
    transport: &Transport,
    hw: &HardwareSpec,
    measured: Option<(TransportStats, f64)>,
) -> PhaseReport {
    let mut classes = ClassBytes::default();
    let mut rounds = Vec::new();
    for (w, trace) in traces.iter().enumerate() {
        for rv in trace {
            classes += rv.bytes;
        }
        rounds.extend(round_records(w, trace, transport, hw));
    }
    let (transport, wall_seconds) = match measured {
        Some((s, w)) => (Some(s), Some(w)),
        None => (None, None),
    };
    PhaseReport {
        phase,
        total_bytes: classes.total(),
        bytes_by_class: bytes_by_class(&classes),
        rounds,
        transport,
        wall_seconds,
    }
}

#[derive(Debug, Clone)]
pub struct DistributedRun {
    /// Gathered `O [h, S_Q, d]` and `L [h, S_Q]`.
    pub state: AttentionState,
    pub grads: Option<GradientBundle>,
    pub forward: PhaseReport,
    pub backward: Option<PhaseReport>,
    /// Per-worker forward and backward traces as recorded by the protocols.
    pub forward_traces: Vec<Vec<RoundVolume>>,
    pub backward_traces: Vec<Vec<RoundVolume>>,
    pub forward_stats: TransportStats,
    pub backward_stats: Option<TransportStats>,
}

fn shard_rows(t: &Tensor, ranges: &[std::ops::Range<usize>]) -> Result<Vec<Tensor>> {
    ranges.iter().map(|r| Ok(t.slice_axis(1, r.clone())?)).collect()
}

/// Runs the forward protocol (and the backward one when `opts.backward`) on
/// fresh clusters, one per phase, and gathers results in sequence order.
pub fn run_distributed(inputs: &AttentionInputs, opts: &RunOptions) -> Result<DistributedRun> {
    let n = opts.workers;
    opts.kind.validate(inputs.heads(), n)?;
    let shards = ShardSpec::balanced(inputs.s_q(), inputs.s_kv(), n)?;
    let qs = shard_rows(&inputs.q, &shards.q_ranges)?;
    let ks = shard_rows(&inputs.k, &shards.kv_ranges)?;
    let vs = shard_rows(&inputs.v, &shards.kv_ranges)?;
    let kind = opts.kind;

    let fwd = spawn_cluster(n, &opts.cluster, |comm| {
        let i = comm.rank();
        strategy::forward(kind, comm, &shards, &qs[i], &ks[i], &vs[i], &opts.kernel)
    })?;
    let states: Vec<&AttentionState> = fwd.results.iter().map(|w| &w.state).collect();
    let state = AttentionState {
        o: Tensor::concat(1, &states.iter().map(|s| s.o.clone()).collect::<Vec<_>>())?,
        l: Tensor::concat(1, &states.iter().map(|s| s.l.clone()).collect::<Vec<_>>())?,
    };
    let forward_traces: Vec<_> = fwd.results.iter().map(|w| w.trace.clone()).collect();
    let forward = phase_report(
        Phase::Forward,
        &forward_traces,
        &opts.cluster.transport,
        &opts.hardware,
        Some((fwd.stats.clone(), fwd.wall.as_secs_f64())),
    );

    let mut run = DistributedRun {
        state,
        grads: None,
        forward,
        backward: None,
        forward_traces,
        backward_traces: Vec::new(),
        forward_stats: fwd.stats,
        backward_stats: None,
    };
    if !opts.backward {
        return Ok(run);
    }

    let dos = shard_rows(&inputs.d_o, &shards.q_ranges)?;
    let bwd = spawn_cluster(n, &opts.cluster, |comm| {
        let i = comm.rank();
        strategy::backward(kind, comm, &shards, &qs[i], &ks[i], &vs[i], &fwd.results[i].state, &dos[i], &opts.kernel)
    })?;
    let cat = |f: fn(&GradientBundle) -> &Tensor| -> Result<Tensor> {
        Ok(Tensor::concat(1, &bwd.results.iter().map(|w| f(&w.grads).clone()).collect::<Vec<_>>())?)
    };
    run.grads = Some(GradientBundle { dq: cat(|g| &g.dq)?, dk: cat(|g| &g.dk)?, dv: cat(|g| &g.dv)? });
    run.backward_traces = bwd.results.iter().map(|w| w.trace.clone()).collect();
    run.backward = Some(phase_report(
        Phase::Backward,
        &run.backward_traces,
        &opts.cluster.transport,
        &opts.hardware,
        Some((bwd.stats.clone(), bwd.wall.as_secs_f64())),
    ));
    run.backward_stats = Some(bwd.stats);
    Ok(run)
}

/// Predicted traffic for a workload, computed from shapes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub strategy: String,
    pub workload: WorkloadSpec,
    pub forward: PhaseReport,
    pub backward: PhaseReport,
    /// LV-XAttn over Ring Attention forward bytes per rotation round.
    pub forward_volume_ratio_lvx_ring: Option<f64>,
    pub forward_volume_ratio_display: Option<String>,
}

/// Formats a ratio as a percentage with one significant digit, e.g. `0.04%`.
pub fn percent_one_sig(ratio: f64) -> String {
    let pct = ratio * 100.0;
    if pct == 0.0 || !pct.is_finite() {
        return format!("{}%", pct);
    }
    let exp = pct.abs().log10().floor() as i32;
    let unit = 10f64.powi(exp);
    let rounded = (pct / unit).round() * unit;
    // rounding can carry into the next decade, e.g. 0.096 -> 0.1
    let exp = rounded.abs().log10().floor() as i32;
    format!("{:.*}%", (-exp).max(0) as usize, rounded)
}

pub fn account(
    kind: StrategyKind,
    workload: &WorkloadSpec,
    transport: &Transport,
    hw: &HardwareSpec,
) -> Result<AccountingReport> {
    let g: Geometry = workload.geometry()?;
    kind.validate(workload.heads as usize, workload.workers as usize)?;
    let n = workload.workers as usize;
    let traces = |phase| (0..n).map(|w| volume::worker_schedule(kind, phase, &g, w)).collect::<Vec<_>>();
    let forward = phase_report(Phase::Forward, &traces(Phase::Forward), transport, hw, None);
    let backward = phase_report(Phase::Backward, &traces(Phase::Backward), transport, hw, None);
    let ratio = if n > 1 { Some(analytics::forward_volume_ratio(workload)?) } else { None };
    Ok(AccountingReport {
        strategy: kind.name().to_string(),
        workload: *workload,
        forward,
        backward,
        forward_volume_ratio_lvx_ring: ratio,
        forward_volume_ratio_display: ratio.map(percent_one_sig),
    })
}

pub fn parse_strategy(name: &str) -> Result<StrategyKind> {
    StrategyKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::config("strategy", format!("unknown strategy '{}' (lvx, ring, head, single)", name)))
}

pub fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::config("dtype", format!("unknown dtype '{}' (f32, f64)", other))),
    }
}
