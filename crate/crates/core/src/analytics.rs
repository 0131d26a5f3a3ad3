//! Closed-form runtime, communication and memory models.
//!
//! Per-round runtime of either protocol is `max(compute, comm)`: compute is
//! the attention of an `S_Q/n × S_KV/n` tile pair (`4·…·h·d` FLOPs forward,
//! `10·…` backward), comm is the payload of one rotation. LV-XAttn rotates
//! query-sized blocks, Ring Attention key-value-sized blocks, so for long
//! visual inputs and slow links LV-XAttn is compute-bound while Ring
//! Attention is communication-bound. Volumes are in bytes: the element
//! counts from the shared message tables times `elem_bytes`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::shard::ShardSpec;
use crate::strategy::StrategyKind;
use crate::volume::{
    self, Geometry, MessageClass, Phase, RoundKind, LVX_BACKWARD_LOOP, LVX_FORWARD_LOOP, RING_BACKWARD_GRADS,
    RING_BACKWARD_KV, RING_FORWARD,
};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HardwareSpec {
    /// Floating-point operations per second.
    pub gpu_flops: f64,
    /// Bytes per second.
    pub net_bandwidth: f64,
}

impl HardwareSpec {
    /// A100-class peak with a 25 GB/s cross-node link.
    pub const A100_25GBPS: HardwareSpec = HardwareSpec { gpu_flops: 312e12, net_bandwidth: 25e9 };

    pub fn validate(&self) -> Result<()> {
        if !(self.gpu_flops > 0.0 && self.gpu_flops.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("gpu_flops must be positive, got {}", self.gpu_flops)));
        }
        if !(self.net_bandwidth > 0.0 && self.net_bandwidth.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "net_bandwidth must be positive, got {}",
                self.net_bandwidth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorkloadSpec {
    pub s_q: u64,
    pub s_kv: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub workers: u64,
    pub elem_bytes: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("s_q", self.s_q),
            ("s_kv", self.s_kv),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("workers", self.workers),
            ("elem_bytes", self.elem_bytes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(alloc::format!("{} must be positive", name)));
            }
        }
        Ok(())
    }

    /// Exact integer geometry for byte-counter predictions.
    pub fn geometry(&self) -> Result<Geometry> {
        self.validate()?;
        Ok(Geometry {
            shards: ShardSpec::balanced(self.s_q as usize, self.s_kv as usize, self.workers as usize)?,
            heads: self.heads as usize,
            head_dim: self.head_dim as usize,
            elem_bytes: self.elem_bytes as usize,
        })
    }

    fn q_per_worker(&self) -> f64 {
        self.s_q as f64 / self.workers as f64
    }

    fn kv_per_worker(&self) -> f64 {
        self.s_kv as f64 / self.workers as f64
    }

    /// Bytes per row of a message made of `classes`.
    fn row_bytes(&self, classes: &[MessageClass]) -> f64 {
        let elems: usize = classes.iter().map(|c| c.row_elems(self.heads as usize, self.head_dim as usize)).sum();
        (elems as u64 * self.elem_bytes) as f64
    }
}

/// Per-round times of one protocol, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StrategyTimes {
    pub compute_fwd: f64,
    pub comm_fwd: f64,
    pub compute_bwd: f64,
    pub comm_bwd: f64,
}

impl StrategyTimes {
    pub fn round_fwd(&self) -> f64 {
        self.compute_fwd.max(self.comm_fwd)
    }

    pub fn round_bwd(&self) -> f64 {
        self.compute_bwd.max(self.comm_bwd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundTimes {
    pub lvx: StrategyTimes,
    pub ring: StrategyTimes,
}

pub fn round_times(w: &WorkloadSpec, hw: &HardwareSpec) -> RoundTimes {
    let tile = w.q_per_worker() * w.kv_per_worker() * (w.heads * w.head_dim) as f64;
    let compute_fwd = 4.0 * tile / hw.gpu_flops;
    let compute_bwd = 10.0 * tile / hw.gpu_flops;
    let (lvx_fwd, lvx_bwd, ring_fwd, ring_bwd) = if w.workers == 1 {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        let q_rows = w.q_per_worker();
        let kv_rows = w.kv_per_worker();
        let ring_bwd_bytes = w.row_bytes(&RING_BACKWARD_KV) + w.row_bytes(&RING_BACKWARD_GRADS);
        (
            q_rows * w.row_bytes(&LVX_FORWARD_LOOP) / hw.net_bandwidth,
            q_rows * w.row_bytes(&LVX_BACKWARD_LOOP) / hw.net_bandwidth,
            kv_rows * w.row_bytes(&RING_FORWARD) / hw.net_bandwidth,
            kv_rows * ring_bwd_bytes / hw.net_bandwidth,
        )
    };
    RoundTimes {
        lvx: StrategyTimes { compute_fwd, comm_fwd: lvx_fwd, compute_bwd, comm_bwd: lvx_bwd },
        ring: StrategyTimes { compute_fwd, comm_fwd: ring_fwd, compute_bwd, comm_bwd: ring_bwd },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Speedup {
    pub forward: f64,
    pub backward: f64,
}

/// Ring round time over LV-XAttn round time, valid in every regime.
pub fn speedup(w: &WorkloadSpec, hw: &HardwareSpec) -> Speedup {
    let t = round_times(w, hw);
    Speedup { forward: t.ring.round_fwd() / t.lvx.round_fwd(), backward: t.ring.round_bwd() / t.lvx.round_bwd() }
}

/// The closed form for LV-XAttn compute-bound and Ring communication-bound:
/// `b·flops / (2·(S_Q/n)·bw)` forward and `2·b·flops / (5·(S_Q/n)·bw)` backward.
/// The element size `b` appears because bandwidth is in bytes per second.
pub fn table_speedup(w: &WorkloadSpec, hw: &HardwareSpec) -> Speedup {
    let num = hw.gpu_flops * w.elem_bytes as f64;
    let denom = w.q_per_worker() * hw.net_bandwidth;
    Speedup { forward: num / (2.0 * denom), backward: 2.0 * num / (5.0 * denom) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Bound {
    Compute,
    Communication,
}

/// Position on the (S_Q horizontal, S_KV vertical) speedup map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Quadrant {
    /// LV-XAttn compute-bound, Ring communication-bound.
    TopLeft,
    /// Both communication-bound.
    BottomLeft,
    /// Both compute-bound.
    TopRight,
    /// LV-XAttn communication-bound, Ring compute-bound.
    BottomRight,
}

impl Quadrant {
    pub fn from_bounds(lvx: Bound, ring: Bound) -> Self {
        match (lvx, ring) {
            (Bound::Compute, Bound::Communication) => Quadrant::TopLeft,
            (Bound::Communication, Bound::Communication) => Quadrant::BottomLeft,
            (Bound::Compute, Bound::Compute) => Quadrant::TopRight,
            (Bound::Communication, Bound::Compute) => Quadrant::BottomRight,
        }
    }

    pub const fn label(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top-left",
            Quadrant::BottomLeft => "bottom-left",
            Quadrant::TopRight => "top-right",
            Quadrant::BottomRight => "bottom-right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegimeReport {
    pub lvx_bound: Bound,
    pub ring_bound: Bound,
    pub quadrant: Quadrant,
    pub speedup_forward: f64,
    pub speedup_backward: f64,
    /// Closed-form forward speedup, present when its regime conditions hold.
    pub table_forward: Option<f64>,
    /// Closed-form backward speedup, present when the backward regime conditions hold.
    pub table_backward: Option<f64>,
}

fn bound(compute: f64, comm: f64) -> Bound {
    if compute >= comm {
        Bound::Compute
    } else {
        Bound::Communication
    }
}

pub fn classify_regime(w: &WorkloadSpec, hw: &HardwareSpec) -> RegimeReport {
    let t = round_times(w, hw);
    let s = speedup(w, hw);
    let table = table_speedup(w, hw);
    let lvx_bound = bound(t.lvx.compute_fwd, t.lvx.comm_fwd);
    let ring_bound = bound(t.ring.compute_fwd, t.ring.comm_fwd);
    let quadrant = Quadrant::from_bounds(lvx_bound, ring_bound);
    let bwd_quadrant = Quadrant::from_bounds(
        bound(t.lvx.compute_bwd, t.lvx.comm_bwd),
        bound(t.ring.compute_bwd, t.ring.comm_bwd),
    );
    RegimeReport {
        lvx_bound,
        ring_bound,
        quadrant,
        speedup_forward: s.forward,
        speedup_backward: s.backward,
        table_forward: (quadrant == Quadrant::TopLeft).then_some(table.forward),
        table_backward: (bwd_quadrant == Quadrant::TopLeft).then_some(table.backward),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryEstimate {
    /// `2·S_KV·d_model·b`
    pub kv_bytes: u64,
    /// K, V plus Q, O and per-row statistics.
    pub flash_working_set_bytes: u64,
}

pub fn memory_cross_attention(s_q: u64, s_kv: u64, d_model: u64, elem_bytes: u64) -> MemoryEstimate {
    let kv_bytes = 2 * s_kv * d_model * elem_bytes;
    MemoryEstimate { kv_bytes, flash_working_set_bytes: kv_bytes + (2 * s_q * d_model + s_q) * elem_bytes }
}

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum VideoModel {
    Llama3v,
    Owl3,
    Openflamingo,
}

impl VideoModel {
    pub const fn tokens_per_frame(self) -> u64 {
        match self {
            VideoModel::Llama3v => 6404,
            VideoModel::Owl3 => 729,
            VideoModel::Openflamingo => 64,
        }
    }

    /// (heads, head_dim) of the language model the cross-attention layers live in.
    pub const fn attention_shape(self) -> (u64, u64) {
        match self {
            VideoModel::Llama3v => (32, 128),
            VideoModel::Owl3 => (28, 128),
            VideoModel::Openflamingo => (32, 128),
        }
    }
}

/// One visual token block per frame plus one `<image>` marker per frame in the text.
pub fn workload_from_video(
    model: VideoModel,
    duration_s: u64,
    fps: u64,
    prompt_words: u64,
    workers: u64,
    elem_bytes: u64,
) -> WorkloadSpec {
    let frames = duration_s * fps;
    let (heads, head_dim) = model.attention_shape();
    WorkloadSpec {
        s_q: frames + prompt_words,
        s_kv: frames * model.tokens_per_frame(),
        heads,
        head_dim,
        workers,
        elem_bytes,
    }
}

/// Named paper-scale scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Average long Video-MME video (2386 s at 1 fps, 3128 prompt words) on Llama 3-V.
    VideoMmeLlama3v,
    /// mPLUG-Owl3 with a 3600-frame video.
    Owl3Frames3600,
    /// Llama 3-V, 20-minute video at 1 fps, 2048 text tokens.
    Llama3v20Min,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::VideoMmeLlama3v, Preset::Owl3Frames3600, Preset::Llama3v20Min];

    pub const fn name(self) -> &'static str {
        match self {
            Preset::VideoMmeLlama3v => "video-mme-llama3v",
            Preset::Owl3Frames3600 => "owl3-3600frames",
            Preset::Llama3v20Min => "llama3v-20min",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Workload with 16 workers; element size as given.
    pub fn workload(self, elem_bytes: u64) -> WorkloadSpec {
        match self {
            Preset::VideoMmeLlama3v => workload_from_video(VideoModel::Llama3v, 2386, 1, 3128, 16, elem_bytes),
            Preset::Owl3Frames3600 => workload_from_video(VideoModel::Owl3, 3600, 1, 3128, 16, elem_bytes),
            Preset::Llama3v20Min => {
                let mut w = workload_from_video(VideoModel::Llama3v, 1200, 1, 0, 16, elem_bytes);
                w.s_q = 2048;
                w
            }
        }
    }

    pub fn d_model(self) -> u64 {
        let w = self.workload(1);
        w.heads * w.head_dim
    }
}

/// Forward LV-XAttn bytes per rotation round over Ring Attention bytes per
/// shift, both summed over workers. Exact integer counts from the volume model.
pub fn forward_volume_ratio(w: &WorkloadSpec) -> Result<f64> {
    let g = w.geometry()?;
    if w.workers == 1 {
        return Err(Error::InvalidConfig("volume ratio needs at least two workers".into()));
    }
    let lvx = volume::cluster_round_bytes(StrategyKind::LvXAttn, Phase::Forward, &g, RoundKind::Loop);
    let ring = volume::cluster_round_bytes(StrategyKind::RingAttention, Phase::Forward, &g, RoundKind::Loop);
    Ok(lvx[0] as f64 / ring[0] as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    pub s_q: u64,
    pub s_kv: u64,
    pub speedup_fwd: f64,
    pub speedup_bwd: f64,
    pub quadrant: Quadrant,
}

/// Row-major over `s_q_grid × s_kv_grid` (S_Q outer).
pub fn sweep(s_q_grid: &[u64], s_kv_grid: &[u64], base: &WorkloadSpec, hw: &HardwareSpec) -> Result<Vec<SweepRow>> {
    if s_q_grid.is_empty() || s_kv_grid.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".into()));
    }
    hw.validate()?;
    let mut rows = Vec::with_capacity(s_q_grid.len() * s_kv_grid.len());
    for &s_q in s_q_grid {
        for &s_kv in s_kv_grid {
            let w = WorkloadSpec { s_q, s_kv, ..*base };
            w.validate()?;
            let r = classify_regime(&w, hw);
            rows.push(SweepRow { s_q, s_kv, speedup_fwd: r.speedup_forward, speedup_bwd: r.speedup_backward, quadrant: r.quadrant });
        }
    }
    Ok(rows)
}

/// `points` integers log-spaced from `lo` to `hi` inclusive (rounded, deduplicated).
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<u64>> {
    if !(lo >= 1.0 && hi >= lo && points >= 1) {
        return Err(Error::InvalidConfig(alloc::format!("bad log grid {}:{} with {} points", lo, hi, points)));
    }
    let mut out: Vec<u64> = (0..points)
        .map(|i| {
            let t = if points == 1 { 0.0 } else { i as f64 / (points - 1) as f64 };
            libm::round(libm::exp(libm::log(lo) + t * (libm::log(hi) - libm::log(lo)))) as u64
        })
        .collect();
    out.dedup();
    Ok(out)
}

/// `points` integers evenly spaced from `lo` to `hi` inclusive.
pub fn linear_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<u64>> {
    if !(lo >= 1.0 && hi >= lo && points >= 1) {
        return Err(Error::InvalidConfig(alloc::format!("bad linear grid {}:{} with {} points", lo, hi, points)));
    }
    let mut out: Vec<u64> = (0..points)
        .map(|i| {
            let t = if points == 1 { 0.0 } else { i as f64 / (points - 1) as f64 };
            libm::round(lo + t * (hi - lo)) as u64
        })
        .collect();
    out.dedup();
    Ok(out)
}
