//! Invariant suites behind `lvx verify` and the acceptance tests.
//!
//! Every suite enumerates its grid, records one [`Check`] per case with the
//! measured error and its tolerance, and folds the bytes of every produced
//! tensor into a digest so repeated runs can be compared bit for bit.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::time::{Duration, Instant};

use lvx_core::analytics::WorkloadSpec;
use lvx_core::attention::{
    blockwise_attention, dense_attention, dense_attention_backward, merge_states, AttentionState, GradientBundle,
    KernelOptions,
};
use lvx_core::mllm::{
    max_frames_under_budget, mllm_backward, mllm_forward, ActivationPolicy, MemoryLedger, ModelGradients, ModelParams,
    ToyMllmConfig,
};
use lvx_core::rng::{seeded_random_tensor_stream, Seed};
use lvx_core::strategy::StrategyKind;
use lvx_core::volume::{self, Phase};
use lvx_core::{format, DType, ShardSpec, Tensor};
use serde::{Deserialize, Serialize};

use crate::driver::{run_distributed, AttentionInputs, RunOptions};
use crate::error::{Error, Result};
use crate::runtime::{spawn_cluster, ClusterOptions, Transport};

pub const WORKER_COUNTS: [usize; 5] = [1, 2, 3, 4, 6];
pub const HEAD_COUNTS: [usize; 3] = [1, 2, 4];
/// `(S_Q, S_KV)`
pub const SHAPES: [(usize, usize); 4] = [(5, 7), (8, 8), (3, 16), (16, 3)];
pub const HEAD_DIM: usize = 4;

pub const F64_TOL: f64 = 1e-12;
pub const F32_TOL: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
pub const POLICY_TOL: f64 = 1e-13;

/// Shipped toy model and the budget its frame-capacity check uses.
pub const TOY_MLLM_PRESET: &str = include_str!("../../../presets/toy-mllm.json");
pub const TOY_MLLM_BUDGET_BYTES: u64 = 64 << 20;
pub const MIN_FRAMES_RATIO: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Exactness,
    Gradients,
    Volumes,
    Mllm,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Exactness, Suite::Gradients, Suite::Volumes, Suite::Mllm];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Exactness => "exactness",
            Suite::Gradients => "gradients",
            Suite::Volumes => "volumes",
            Suite::Mllm => "mllm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_q: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_kv: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DType>,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            strategy: None,
            workers: None,
            heads: None,
            s_q: None,
            s_kv: None,
            dtype: None,
            measured,
            tolerance,
            passed: measured <= tolerance,
            note: None,
        }
    }

    /// A check that passes when `measured >= minimum`.
    pub fn at_least(name: impl Into<String>, measured: f64, minimum: f64) -> Self {
        let mut c = Check::new(name, measured, minimum);
        c.passed = measured >= minimum;
        c.note = Some("lower bound".into());
        c
    }

    fn case(mut self, case: &Case) -> Self {
        self.strategy = Some(case.kind.name().into());
        self.workers = Some(case.workers);
        self.heads = Some(case.heads);
        self.s_q = Some(case.s_q);
        self.s_kv = Some(case.s_kv);
        self.dtype = Some(case.dtype);
        self
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Hash of every output tensor's LVXT encoding, in check order.
    pub digest: String,
    pub elapsed_seconds: f64,
}

struct Digest(DefaultHasher);

impl Digest {
    fn new() -> Self {
        Digest(DefaultHasher::new())
    }

    fn add(&mut self, t: &Tensor) {
        self.0.write(&format::encode(t));
    }

    fn hex(&self) -> String {
        format!("{:016x}", self.0.finish())
    }
}

/// One point of the strategy × workers × heads × shape × dtype grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub kind: StrategyKind,
    pub workers: usize,
    pub heads: usize,
    pub s_q: usize,
    pub s_kv: usize,
    pub dtype: DType,
}

impl Case {
    /// Independent of the strategy, so every strategy sees the same operands.
    pub fn seed(&self) -> u64 {
        (self.workers as u64) << 32 | (self.heads as u64) << 24 | (self.s_q as u64) << 12 | self.s_kv as u64
    }

    pub fn inputs(&self) -> Result<AttentionInputs> {
        AttentionInputs::generate(self.s_q, self.s_kv, self.heads, HEAD_DIM, self.dtype, self.seed())
    }

    pub fn workload(&self) -> WorkloadSpec {
        WorkloadSpec {
            s_q: self.s_q as u64,
            s_kv: self.s_kv as u64,
            heads: self.heads as u64,
            head_dim: HEAD_DIM as u64,
            workers: self.workers as u64,
            elem_bytes: self.dtype.size_bytes() as u64,
        }
    }
}

/// The full grid, strategy-major.
pub fn grid(kinds: &[StrategyKind], dtypes: &[DType]) -> Vec<Case> {
    let mut out = Vec::new();
    for &kind in kinds {
        for &workers in &WORKER_COUNTS {
            for &heads in &HEAD_COUNTS {
                for &(s_q, s_kv) in &SHAPES {
                    for &dtype in dtypes {
                        out.push(Case { kind, workers, heads, s_q, s_kv, dtype });
                    }
                }
            }
        }
    }
    out
}

/// A case whose strategy rejects the worker/head combination yields a check
/// that passes iff the rejection is the documented precondition error.
fn precondition_check(case: &Case) -> Option<Check> {
    let err = case.kind.validate(case.heads, case.workers).err()?;
    let expected = match case.kind {
        StrategyKind::HeadParallel => matches!(err, lvx_core::Error::HeadsNotDivisible { .. }),
        StrategyKind::SingleWorker => matches!(err, lvx_core::Error::InvalidConfig(_)),
        _ => false,
    };
    Some(Check::new("precondition", if expected { 0.0 } else { 1.0 }, 0.0).case(case).note(err.to_string()))
}

fn widen(t: &Tensor) -> Tensor {
    t.cast(DType::F64)
}

fn oracle(inputs: &AttentionInputs, scale: f64) -> Result<AttentionState> {
    Ok(dense_attention(&widen(&inputs.q), &widen(&inputs.k), &widen(&inputs.v), scale)?)
}

/// Max absolute error for f64, max-normalized error for f32.
fn state_error(got: &AttentionState, want: &AttentionState, dtype: DType) -> f64 {
    let (o, l) = (widen(&got.o), widen(&got.l));
    match dtype {
        DType::F64 => o.max_abs_diff(&want.o).max(l.max_abs_diff(&want.l)),
        DType::F32 => {
            let norm = |diff: f64, t: &Tensor| diff / t.max_abs().max(f64::MIN_POSITIVE);
            norm(o.max_abs_diff(&want.o), &want.o).max(norm(l.max_abs_diff(&want.l), &want.l))
        }
    }
}

fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => F64_TOL,
        DType::F32 => F32_TOL,
    }
}

fn finish(suite: Suite, checks: Vec<Check>, digest: Digest, started: Instant) -> SuiteReport {
    SuiteReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
        digest: digest.hex(),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    match suite {
        Suite::Exactness => exactness(),
        Suite::Gradients => gradients(),
        Suite::Volumes => volumes(),
        Suite::Mllm => mllm(),
    }
}

pub fn exactness() -> Result<SuiteReport> {
    let started = Instant::now();
    let mut digest = Digest::new();
    let mut checks = Vec::new();
    for case in grid(&StrategyKind::ALL, &[DType::F64, DType::F32]) {
        if let Some(c) = precondition_check(&case) {
            checks.push(c);
            continue;
        }
        let inputs = case.inputs()?;
        let opts = RunOptions::new(case.kind, case.workers, HEAD_DIM);
        let run = run_distributed(&inputs, &opts)?;
        let want = oracle(&inputs, opts.kernel.scale)?;
        digest.add(&run.state.o);
        digest.add(&run.state.l);
        let same_dtype = run.state.o.dtype() == case.dtype && run.state.l.dtype() == case.dtype;
        let err = if same_dtype { state_error(&run.state, &want, case.dtype) } else { f64::INFINITY };
        checks.push(Check::new("forward O, L vs dense", err, tolerance(case.dtype)).case(&case));
    }
    Ok(finish(Suite::Exactness, checks, digest, started))
}

/// Largest error of each gradient, normalized by `max(1, max |reference|)`.
fn grad_error(got: &GradientBundle, want: &GradientBundle) -> f64 {
    [(&got.dq, &want.dq), (&got.dk, &want.dk), (&got.dv, &want.dv)]
        .iter()
        .map(|(g, w)| widen(g).max_abs_diff(w) / w.max_abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Worst `|analytic - numeric| / max(max |analytic|, 1e-3)` over all entries.
fn fd_error(analytic: &Tensor, numeric: impl Fn(usize) -> Result<f64>) -> Result<f64> {
    let a = analytic.to_f64_vec();
    let scale = a.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for (i, &ai) in a.iter().enumerate() {
        worst = worst.max((ai - numeric(i)?).abs() / scale);
    }
    Ok(worst)
}

fn perturbed(t: &Tensor, idx: usize, delta: f64) -> Result<Tensor> {
    let mut v = t.to_f64_vec();
    v[idx] += delta;
    Ok(Tensor::from_f64(t.shape(), v)?)
}

fn dot_all(a: &Tensor, b: &Tensor) -> f64 {
    a.to_f64_vec().iter().zip(b.to_f64_vec()).map(|(x, y)| x * y).sum()
}

fn dense_fd_checks(checks: &mut Vec<Check>) -> Result<()> {
    let inputs = AttentionInputs::generate(3, 5, 2, 3, DType::F64, 77)?;
    let scale = KernelOptions::for_head_dim(3).scale;
    let loss = |q: &Tensor, k: &Tensor, v: &Tensor| -> Result<f64> {
        Ok(dot_all(&dense_attention(q, k, v, scale)?.o, &inputs.d_o))
    };
    let st = dense_attention(&inputs.q, &inputs.k, &inputs.v, scale)?;
    let g = dense_attention_backward(&inputs.q, &inputs.k, &inputs.v, &st.o, &st.l, &inputs.d_o, scale)?;
    let (q, k, v) = (&inputs.q, &inputs.k, &inputs.v);
    let central = |f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> { Ok((f(FD_STEP)? - f(-FD_STEP)?) / (2.0 * FD_STEP)) };
    let dq = fd_error(&g.dq, |i| central(&|s| loss(&perturbed(q, i, s)?, k, v)))?;
    let dk = fd_error(&g.dk, |i| central(&|s| loss(q, &perturbed(k, i, s)?, v)))?;
    let dv = fd_error(&g.dv, |i| central(&|s| loss(q, k, &perturbed(v, i, s)?)))?;
    checks.push(Check::new("dense backward dQ vs central differences", dq, FD_TOL));
    checks.push(Check::new("dense backward dK vs central differences", dk, FD_TOL));
    checks.push(Check::new("dense backward dV vs central differences", dv, FD_TOL));
    Ok(())
}

/// The smallest configuration exercising every parameter kind.
pub fn tiny_mllm_config() -> ToyMllmConfig {
    ToyMllmConfig {
        num_lm_blocks: 2,
        ca_positions: vec![1],
        d_embed: 4,
        h: 1,
        d: 2,
        dtype: DType::F64,
        frames: 2,
        tokens_per_frame: 2,
        text_len: 3,
    }
}

struct MllmProblem {
    config: ToyMllmConfig,
    x0: Tensor,
    y: Tensor,
    params: ModelParams,
    d_out: Tensor,
}

impl MllmProblem {
    fn new(config: ToyMllmConfig, seed: u64) -> Result<Self> {
        let (s, e, dt) = (config.text_len, config.d_embed, config.dtype);
        Ok(MllmProblem {
            x0: seeded_random_tensor_stream(Seed(seed), 100, &[s, e], dt, 1.0)?,
            y: seeded_random_tensor_stream(Seed(seed), 101, &[config.s_kv(), e], dt, 1.0)?,
            d_out: seeded_random_tensor_stream(Seed(seed), 102, &[s, e], dt, 1.0)?,
            params: ModelParams::random(&config, Seed(seed))?,
            config,
        })
    }

    fn loss(&self, x0: &Tensor, y: &Tensor, params: &ModelParams) -> Result<f64> {
        let f = mllm_forward(x0, y, params, &self.config, ActivationPolicy::RecomputeKV)?;
        Ok(dot_all(&f.output, &self.d_out))
    }

    fn gradients(&self, policy: ActivationPolicy) -> Result<(Tensor, ModelGradients, MemoryLedger, u64, u64)> {
        let f = mllm_forward(&self.x0, &self.y, &self.params, &self.config, policy)?;
        let measured = f.saved.measured_bytes();
        let b = mllm_backward(&self.d_out, &f.saved, &self.y, &self.params, &self.config, policy)?;
        Ok((f.output, b.grads, f.ledger, measured, b.ops.recompute_flops))
    }
}

fn param_slot<'a>(p: &'a mut ModelParams, name: &str) -> &'a mut Tensor {
    let (layer, field) = name.split_once('.').expect("named parameter");
    if let Some(i) = layer.strip_prefix("lm") {
        let b = &mut p.lm[i.parse::<usize>().unwrap()];
        return if field == "w1" { &mut b.w1 } else { &mut b.w2 };
    }
    let c = &mut p.ca[layer.strip_prefix("ca").unwrap().parse::<usize>().unwrap()];
    match field {
        "wq" => &mut c.wq,
        "wk" => &mut c.wk,
        "wv" => &mut c.wv,
        _ => &mut c.wo,
    }
}

fn mllm_fd_checks(checks: &mut Vec<Check>) -> Result<()> {
    let prob = MllmProblem::new(tiny_mllm_config(), 5)?;
    let (_, grads, _, _, _) = prob.gradients(ActivationPolicy::RecomputeKV)?;
    let central = |f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> { Ok((f(FD_STEP)? - f(-FD_STEP)?) / (2.0 * FD_STEP)) };
    for (name, analytic) in grads.named() {
        let err = match name.as_str() {
            "x0" => fd_error(analytic, |i| central(&|s| prob.loss(&perturbed(&prob.x0, i, s)?, &prob.y, &prob.params)))?,
            "y" => fd_error(analytic, |i| central(&|s| prob.loss(&prob.x0, &perturbed(&prob.y, i, s)?, &prob.params)))?,
            _ => fd_error(analytic, |i| {
                central(&|s| {
                    let mut p = prob.params.clone();
                    let slot = param_slot(&mut p, &name);
                    *slot = perturbed(slot, i, s)?;
                    prob.loss(&prob.x0, &prob.y, &p)
                })
            })?,
        };
        checks.push(Check::new(format!("toy model d{} vs central differences", name), err, FD_TOL));
    }
    Ok(())
}

pub fn gradients() -> Result<SuiteReport> {
    let started = Instant::now();
    let mut digest = Digest::new();
    let mut checks = Vec::new();
    for case in grid(&StrategyKind::ALL, &[DType::F64]) {
        if let Some(c) = precondition_check(&case) {
            checks.push(c);
            continue;
        }
        let inputs = case.inputs()?;
        let mut opts = RunOptions::new(case.kind, case.workers, HEAD_DIM);
        opts.backward = true;
        let run = run_distributed(&inputs, &opts)?;
        let scale = opts.kernel.scale;
        let st = oracle(&inputs, scale)?;
        let want = dense_attention_backward(&inputs.q, &inputs.k, &inputs.v, &st.o, &st.l, &inputs.d_o, scale)?;
        let got = run.grads.as_ref().expect("backward requested");
        for t in [&got.dq, &got.dk, &got.dv] {
            digest.add(t);
        }
        checks.push(Check::new("backward dQ, dK, dV vs dense", grad_error(got, &want), F64_TOL).case(&case));
    }
    dense_fd_checks(&mut checks)?;
    mllm_fd_checks(&mut checks)?;
    Ok(finish(Suite::Gradients, checks, digest, started))
}

/// Per-worker bytes written out term by term, independent of the round schedule.
pub fn closed_form_worker_bytes(case: &Case, phase: Phase, worker: usize) -> Result<u64> {
    let n = case.workers;
    if n == 1 || case.kind == StrategyKind::SingleWorker {
        return Ok(0);
    }
    let shards = ShardSpec::balanced(case.s_q, case.s_kv, n)?;
    let (h, d, b) = (case.heads as u64, HEAD_DIM as u64, case.dtype.size_bytes() as u64);
    let hd = h * d;
    let q = |j: usize| shards.q_rows(j % n) as u64;
    let kv = |j: usize| shards.kv_rows(j % n) as u64;
    let i = worker;
    let s_q: u64 = (0..n).map(q).sum();
    let bytes = match (case.kind, phase) {
        (StrategyKind::LvXAttn, Phase::Forward) => s_q * (2 * hd + h) * b + q(i + 1) * (hd + h) * b,
        (StrategyKind::LvXAttn, Phase::Backward) => s_q * (3 * hd + 2 * h) * b + q(i + 1) * hd * b,
        (StrategyKind::RingAttention, phase) => {
            let hops: u64 = (0..n - 1).map(|r| 2 * hd * kv(i + n - r)).sum::<u64>() * b;
            let grads: u64 = (0..n).map(|r| 2 * hd * kv(i + n - r)).sum::<u64>() * b;
            if phase == Phase::Forward {
                hops
            } else {
                hops + grads
            }
        }
        (StrategyKind::HeadParallel, phase) => {
            let g = h / n as u64;
            let others = (n - 1) as u64;
            let other_q: u64 = (0..n).filter(|&k| k != i).map(q).sum();
            let other_kv: u64 = (0..n).filter(|&k| k != i).map(kv).sum();
            match phase {
                Phase::Forward => (others * (q(i) * g * d + kv(i) * 2 * g * d) + other_q * (g * d + g)) * b,
                Phase::Backward => {
                    (others * (q(i) * (2 * g * d + 2 * g) + kv(i) * 2 * g * d) + other_q * g * d + other_kv * 2 * g * d)
                        * b
                }
            }
        }
        (StrategyKind::SingleWorker, _) => 0,
    };
    Ok(bytes)
}

pub fn volumes() -> Result<SuiteReport> {
    let started = Instant::now();
    let mut digest = Digest::new();
    let mut checks = Vec::new();
    for case in grid(&StrategyKind::ALL, &[DType::F64, DType::F32]) {
        if let Some(c) = precondition_check(&case) {
            checks.push(c);
            continue;
        }
        let inputs = case.inputs()?;
        let mut opts = RunOptions::new(case.kind, case.workers, HEAD_DIM);
        opts.backward = true;
        let run = run_distributed(&inputs, &opts)?;
        let g = case.workload().geometry()?;
        let phases = [
            (Phase::Forward, &run.forward_stats, &run.forward_traces),
            (Phase::Backward, run.backward_stats.as_ref().expect("backward requested"), &run.backward_traces),
        ];
        for (phase, stats, traces) in phases {
            // worst absolute disagreement between counters, traces, schedule and closed form
            let mut worst = 0u64;
            for w in 0..case.workers {
                let counted = stats.bytes_from(w);
                let traced: u64 = traces[w].iter().map(|r| r.bytes.total()).sum();
                let scheduled = volume::worker_bytes(case.kind, phase, &g, w);
                let closed = closed_form_worker_bytes(&case, phase, w)?;
                for x in [traced, scheduled, closed] {
                    worst = worst.max(counted.abs_diff(x));
                }
                if traces[w].len() != volume::worker_schedule(case.kind, phase, &g, w).len() {
                    worst = worst.max(u64::MAX);
                }
            }
            let predicted = volume::total_bytes(case.kind, phase, &g);
            worst = worst.max(stats.total_bytes().abs_diff(predicted));
            let name = match phase {
                Phase::Forward => "forward bytes: counters vs closed form and analytics",
                Phase::Backward => "backward bytes: counters vs closed form and analytics",
            };
            checks.push(Check::new(name, worst as f64, 0.0).case(&case));
        }
        digest.add(&run.state.o);
    }
    Ok(finish(Suite::Volumes, checks, digest, started))
}

pub fn toy_mllm_preset() -> Result<ToyMllmConfig> {
    serde_json::from_str(TOY_MLLM_PRESET).map_err(|source| Error::Json { path: "presets/toy-mllm.json".into(), source })
}

/// Frame capacity of both policies under `budget`, and their ratio.
pub fn frames_ratio(config: &ToyMllmConfig, budget: u64) -> Result<(usize, usize, f64)> {
    let store = max_frames_under_budget(config, ActivationPolicy::StoreKV, budget)?;
    let recompute = max_frames_under_budget(config, ActivationPolicy::RecomputeKV, budget)?;
    let ratio = if store == 0 { f64::INFINITY } else { recompute as f64 / store as f64 };
    Ok((store, recompute, ratio))
}

fn relative_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / a.max_abs().max(f64::MIN_POSITIVE)
}

pub fn mllm() -> Result<SuiteReport> {
    let started = Instant::now();
    let mut digest = Digest::new();
    let mut checks = Vec::new();
    let configs = [
        tiny_mllm_config(),
        ToyMllmConfig { num_lm_blocks: 4, ca_positions: vec![0, 1, 3], d_embed: 8, h: 2, d: 4, frames: 3, tokens_per_frame: 5, text_len: 6, dtype: DType::F64 },
        ToyMllmConfig { num_lm_blocks: 3, ca_positions: vec![], d_embed: 6, h: 3, d: 2, frames: 2, tokens_per_frame: 4, text_len: 4, dtype: DType::F64 },
        ToyMllmConfig { num_lm_blocks: 2, ca_positions: vec![1, 1], d_embed: 4, h: 2, d: 3, frames: 4, tokens_per_frame: 3, text_len: 5, dtype: DType::F64 },
    ];
    for (idx, config) in configs.into_iter().enumerate() {
        let prob = MllmProblem::new(config.clone(), 40 + idx as u64)?;
        let (out_s, grads_s, ledger_s, measured_s, flops_s) = prob.gradients(ActivationPolicy::StoreKV)?;
        let (out_r, grads_r, ledger_r, measured_r, flops_r) = prob.gradients(ActivationPolicy::RecomputeKV)?;
        let tag = format!("config {}", idx);
        let mut worst = relative_gap(&out_s, &out_r);
        for ((_, a), (_, b)) in grads_s.named().into_iter().zip(grads_r.named()) {
            worst = worst.max(relative_gap(a, b));
            digest.add(a);
        }
        checks.push(Check::new(format!("{}: store vs recompute outputs and gradients", tag), worst, POLICY_TOL));

        let c = config.num_ca_layers() as u64;
        let kv = c * 2 * config.s_kv() as u64 * (config.h * config.d) as u64 * config.dtype.size_bytes() as u64;
        let gap = (ledger_s.peak_total - ledger_r.peak_total).abs_diff(kv);
        checks.push(Check::new(format!("{}: ledger peak difference minus C*2*S_KV*h*d*b", tag), gap as f64, 0.0));
        let mismatch = measured_s.abs_diff(ledger_s.saved_activation_bytes()) + measured_r.abs_diff(ledger_r.saved_activation_bytes());
        checks.push(Check::new(format!("{}: measured saved bytes vs ledger", tag), mismatch as f64, 0.0));
        checks.push(Check::new(format!("{}: visual feature copies above one", tag), (ledger_r.visual_feature_copies - 1) as f64, 0.0));
        let extra = 2 * 2 * c * config.s_kv() as u64 * config.d_embed as u64 * (config.h * config.d) as u64;
        let op_gap = (flops_r - flops_s).abs_diff(extra);
        checks.push(Check::new(format!("{}: recompute FLOPs minus C*2 projections of y", tag), op_gap as f64, 0.0));
    }
    mllm_fd_checks(&mut checks)?;

    let preset = toy_mllm_preset()?;
    let (store, recompute, ratio) = frames_ratio(&preset, TOY_MLLM_BUDGET_BYTES)?;
    checks.push(
        Check::at_least("toy preset: max frames recompute / store", ratio, MIN_FRAMES_RATIO)
            .note(format!("store {} frames, recompute {} frames, budget {} bytes", store, recompute, TOY_MLLM_BUDGET_BYTES)),
    );
    Ok(finish(Suite::Mllm, checks, digest, started))
}

/// Wall times of LV-XAttn forward over a throttled link and of the same
/// kernel schedule with no communication at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub workers: usize,
    pub kv_rows_per_worker: usize,
    pub q_rows_per_worker: usize,
    pub kernel_seconds: f64,
    pub comm_seconds_per_round: f64,
    pub bandwidth: f64,
    pub lvx_seconds: Vec<f64>,
    pub compute_only_seconds: Vec<f64>,
    /// Best LV-XAttn trial over best compute-only trial.
    pub ratio: f64,
}

/// Runs the overlap experiment: `S_KV/n = 2048`, `h·d = 128`, bandwidth set so
/// one rotation takes `comm_fraction` of a measured kernel call.
pub fn overlap_experiment(workers: usize, trials: usize, comm_fraction: f64) -> Result<OverlapReport> {
    let (heads, head_dim, kv_per, q_per) = (1usize, 128usize, 2048usize, 64usize);
    let inputs = AttentionInputs::generate(q_per * workers, kv_per * workers, heads, head_dim, DType::F64, 2024)?;
    let shards = ShardSpec::balanced(inputs.s_q(), inputs.s_kv(), workers)?;
    let kernel = KernelOptions::for_head_dim(head_dim);
    let qs: Vec<Tensor> = shards.q_ranges.iter().map(|r| inputs.q.slice_axis(1, r.clone())).collect::<lvx_core::Result<_>>()?;
    let ks: Vec<Tensor> = shards.kv_ranges.iter().map(|r| inputs.k.slice_axis(1, r.clone())).collect::<lvx_core::Result<_>>()?;
    let vs: Vec<Tensor> = shards.kv_ranges.iter().map(|r| inputs.v.slice_axis(1, r.clone())).collect::<lvx_core::Result<_>>()?;

    let kernel_seconds = (0..3)
        .map(|_| {
            let t = Instant::now();
            blockwise_attention(&qs[0], &ks[0], &vs[0], &kernel).map(|_| t.elapsed())
        })
        .collect::<lvx_core::Result<Vec<Duration>>>()?
        .into_iter()
        .min()
        .unwrap()
        .as_secs_f64();
    let message_bytes = (q_per * (2 * heads * head_dim + heads) * 8) as f64;
    let comm_seconds = comm_fraction * kernel_seconds;
    let bandwidth = message_bytes / comm_seconds;

    let compute_only = || -> Result<f64> {
        let out = spawn_cluster(workers, &ClusterOptions::new(Transport::Instant), |comm| {
            use lvx_core::comm::Communicator;
            let (n, i) = (comm.size(), comm.rank());
            let mut acc: Option<AttentionState> = None;
            for r in 0..n {
                let j = (i + n - r) % n;
                let part = blockwise_attention(&qs[j], &ks[i], &vs[i], &kernel)?;
                acc = Some(match acc {
                    None => part,
                    Some(a) if a.rows() == part.rows() => merge_states(&a, &part)?,
                    Some(_) => part,
                });
            }
            Ok(acc.map(|s| s.rows()).unwrap_or(0))
        })?;
        Ok(out.wall.as_secs_f64())
    };
    let mut lvx_opts = RunOptions::new(StrategyKind::LvXAttn, workers, head_dim);
    lvx_opts.cluster = ClusterOptions::new(Transport::Throttled { bandwidth, latency: 0.0 });
    let lvx = || -> Result<f64> { Ok(run_distributed(&inputs, &lvx_opts)?.forward.wall_seconds.unwrap_or(f64::INFINITY)) };

    let mut lvx_seconds = Vec::with_capacity(trials);
    let mut compute_only_seconds = Vec::with_capacity(trials);
    for _ in 0..trials {
        compute_only_seconds.push(compute_only()?);
        lvx_seconds.push(lvx()?);
    }
    let best = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(OverlapReport {
        workers,
        kv_rows_per_worker: kv_per,
        q_rows_per_worker: q_per,
        kernel_seconds,
        comm_seconds_per_round: comm_seconds,
        bandwidth,
        ratio: best(&lvx_seconds) / best(&compute_only_seconds),
        lvx_seconds,
        compute_only_seconds,
    })
}
