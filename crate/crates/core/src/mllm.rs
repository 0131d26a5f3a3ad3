//! Toy cross-attention MLLM used to study activation recomputation.
//!
//! The language stream `x [S_Q, d_embed]` passes through `num_lm_blocks`
//! residual MLP blocks `x + tanh(x·W1)·W2`. Cross-attention layers sit in
//! front of the blocks named by `ca_positions` and compute
//! `x + merge_heads(Attn(x·W_Q, y·W_K, y·W_V))·W_O` against one shared visual
//! buffer `y [S_KV, d_embed]`.
//!
//! Under [`ActivationPolicy::StoreKV`] each layer keeps `x, K, V, O, L` for
//! backward; under [`ActivationPolicy::RecomputeKV`] it keeps `x, O, L` and
//! re-projects `K, V` from `y`. `Q` is recomputed from `x` under both.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    attention_delta, blockwise_attention, blockwise_attention_backward, merge_heads, project, project_backward,
    split_heads, KernelOptions,
};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn};
use crate::rng::{seeded_random_tensor_stream, Seed};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyMllmConfig {
    pub num_lm_blocks: usize,
    /// Block index each cross-attention layer precedes, in layer order.
    pub ca_positions: Vec<usize>,
    pub d_embed: usize,
    pub h: usize,
    pub d: usize,
    pub dtype: DType,
    pub frames: usize,
    pub tokens_per_frame: usize,
    /// Text length `S_Q`.
    pub text_len: usize,
}

impl ToyMllmConfig {
    pub fn s_kv(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn num_ca_layers(&self) -> usize {
        self.ca_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_embed == 0 || self.h == 0 || self.d == 0 {
            return Err(Error::InvalidConfig("d_embed, h and d must be positive".into()));
        }
        if self.text_len == 0 {
            return Err(Error::InvalidConfig("text_len must be positive".into()));
        }
        if let Some(&p) = self.ca_positions.iter().find(|&&p| p >= self.num_lm_blocks) {
            return Err(Error::InvalidConfig(alloc::format!(
                "ca_position {} out of range for {} LM blocks",
                p,
                self.num_lm_blocks
            )));
        }
        if self.ca_positions.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig("ca_positions must be non-decreasing".into()));
        }
        Ok(())
    }

    fn layers_before(&self, block: usize) -> impl Iterator<Item = usize> + '_ {
        self.ca_positions.iter().enumerate().filter(move |(_, &p)| p == block).map(|(c, _)| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ActivationPolicy {
    StoreKV,
    RecomputeKV,
}

impl ActivationPolicy {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "store" | "store-kv" | "StoreKV" => Some(ActivationPolicy::StoreKV),
            "recompute" | "recompute-kv" | "RecomputeKV" => Some(ActivationPolicy::RecomputeKV),
            _ => None,
        }
    }
}

/// Bytes of parameters and saved activations, computed from shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryLedger {
    pub parameters: u64,
    /// The one shared visual buffer.
    pub visual_features_y: u64,
    pub visual_feature_copies: u64,
    /// The live language stream.
    pub live_x: u64,
    pub lm_block_inputs: u64,
    pub per_layer_saved_x: Vec<u64>,
    pub per_layer_saved_o_l: Vec<u64>,
    pub per_layer_saved_kv: Vec<u64>,
    /// Largest running sum over layers in forward order.
    pub peak_total: u64,
}

impl MemoryLedger {
    pub fn analytic(config: &ToyMllmConfig, policy: ActivationPolicy) -> Self {
        let b = config.dtype.size_bytes() as u64;
        let (e, hd) = (config.d_embed as u64, (config.h * config.d) as u64);
        let (s_q, s_kv) = (config.text_len as u64, config.s_kv() as u64);
        let c = config.num_ca_layers() as u64;
        let parameters = (config.num_lm_blocks as u64 * 2 * e * e + c * 4 * e * hd) * b;
        let x_bytes = s_q * e * b;
        let o_l = (s_q * hd + s_q * config.h as u64) * b;
        let kv = match policy {
            ActivationPolicy::StoreKV => 2 * s_kv * hd * b,
            ActivationPolicy::RecomputeKV => 0,
        };
        let mut ledger = MemoryLedger {
            parameters,
            visual_features_y: s_kv * e * b,
            visual_feature_copies: 1,
            live_x: x_bytes,
            lm_block_inputs: 0,
            per_layer_saved_x: Vec::new(),
            per_layer_saved_o_l: Vec::new(),
            per_layer_saved_kv: Vec::new(),
            peak_total: 0,
        };
        let mut running = parameters + ledger.visual_features_y + x_bytes;
        let mut peak = running;
        for block in 0..config.num_lm_blocks {
            for _ in config.layers_before(block) {
                ledger.per_layer_saved_x.push(x_bytes);
                ledger.per_layer_saved_o_l.push(o_l);
                ledger.per_layer_saved_kv.push(kv);
                running += x_bytes + o_l + kv;
                peak = peak.max(running);
            }
            ledger.lm_block_inputs += x_bytes;
            running += x_bytes;
            peak = peak.max(running);
        }
        ledger.peak_total = peak;
        ledger
    }

    pub fn saved_activation_bytes(&self) -> u64 {
        let layers: u64 = self
            .per_layer_saved_x
            .iter()
            .chain(&self.per_layer_saved_o_l)
            .chain(&self.per_layer_saved_kv)
            .sum();
        self.lm_block_inputs + layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmBlockParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    /// `[d_embed, h·d]`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[h·d, d_embed]`
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub lm: Vec<LmBlockParams>,
    pub ca: Vec<CrossAttnParams>,
}

impl ModelParams {
    /// Uniform weights in `±1/sqrt(fan_in)`, one keystream per matrix.
    pub fn random(config: &ToyMllmConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let (e, hd, dt) = (config.d_embed, config.h * config.d, config.dtype);
        let mut stream = 0u64;
        let mut next = |rows: usize, cols: usize| {
            stream += 1;
            seeded_random_tensor_stream(seed, stream, &[rows, cols], dt, 1.0 / libm::sqrt(rows as f64))
        };
        let lm = (0..config.num_lm_blocks)
            .map(|_| Ok(LmBlockParams { w1: next(e, e)?, w2: next(e, e)? }))
            .collect::<Result<Vec<_>>>()?;
        let ca = (0..config.num_ca_layers())
            .map(|_| Ok(CrossAttnParams { wq: next(e, hd)?, wk: next(e, hd)?, wv: next(e, hd)?, wo: next(hd, e)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { lm, ca })
    }

    pub fn check(&self, config: &ToyMllmConfig) -> Result<()> {
        let (e, hd) = (config.d_embed, config.h * config.d);
        if self.lm.len() != config.num_lm_blocks || self.ca.len() != config.num_ca_layers() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} LM blocks and {} cross-attention layers for config with {} and {}",
                self.lm.len(),
                self.ca.len(),
                config.num_lm_blocks,
                config.num_ca_layers()
            )));
        }
        let expect = |t: &Tensor, shape: [usize; 2], name: &str| -> Result<()> {
            if t.shape() != shape || t.dtype() != config.dtype {
                return Err(Error::ShapeMismatch(alloc::format!("{} is {:?} {:?}, expected {:?}", name, t.shape(), t.dtype(), shape)));
            }
            if !t.is_finite(false) {
                return Err(Error::NonFinite("parameter"));
            }
            Ok(())
        };
        for p in &self.lm {
            expect(&p.w1, [e, e], "W1")?;
            expect(&p.w2, [e, e], "W2")?;
        }
        for p in &self.ca {
            expect(&p.wq, [e, hd], "W_Q")?;
            expect(&p.wk, [e, hd], "W_K")?;
            expect(&p.wv, [e, hd], "W_V")?;
            expect(&p.wo, [hd, e], "W_O")?;
        }
        Ok(())
    }
}

/// What one cross-attention layer kept for backward.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SavedLayer {
    pub x: Option<Tensor>,
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
    pub o: Option<Tensor>,
    pub l: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedActivations {
    pub policy: ActivationPolicy,
    pub lm_inputs: Vec<Option<Tensor>>,
    pub layers: Vec<SavedLayer>,
}

impl SavedActivations {
    /// Bytes actually held, for comparison with the analytic ledger.
    pub fn measured_bytes(&self) -> u64 {
        let layer_bytes = self.layers.iter().flat_map(|s| [&s.x, &s.k, &s.v, &s.o, &s.l]);
        self.lm_inputs.iter().chain(layer_bytes).flatten().map(|t| t.byte_size() as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MllmForward {
    pub output: Tensor,
    pub saved: SavedActivations,
    pub ledger: MemoryLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmBlockGrads {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnGrads {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub x0: Tensor,
    pub y: Tensor,
    pub lm: Vec<LmBlockGrads>,
    pub ca: Vec<CrossAttnGrads>,
}

impl ModelGradients {
    /// Every gradient tensor with a stable name, in model order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![(String::from("x0"), &self.x0), (String::from("y"), &self.y)];
        for (i, g) in self.lm.iter().enumerate() {
            out.push((alloc::format!("lm{}.w1", i), &g.w1));
            out.push((alloc::format!("lm{}.w2", i), &g.w2));
        }
        for (c, g) in self.ca.iter().enumerate() {
            out.push((alloc::format!("ca{}.wq", c), &g.wq));
            out.push((alloc::format!("ca{}.wk", c), &g.wk));
            out.push((alloc::format!("ca{}.wv", c), &g.wv));
            out.push((alloc::format!("ca{}.wo", c), &g.wo));
        }
        out
    }
}

/// Multiply-add FLOPs of the projections run during backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OpCount {
    pub recompute_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MllmBackward {
    pub grads: ModelGradients,
    pub ops: OpCount,
}

fn check_inputs(x0: &Tensor, y: &Tensor, params: &ModelParams, config: &ToyMllmConfig) -> Result<()> {
    config.validate()?;
    params.check(config)?;
    if x0.shape() != [config.text_len, config.d_embed] {
        return Err(Error::ShapeMismatch(alloc::format!(
            "x0 is {:?}, expected [{}, {}]",
            x0.shape(),
            config.text_len,
            config.d_embed
        )));
    }
    if y.shape() != [config.s_kv(), config.d_embed] {
        return Err(Error::ShapeMismatch(alloc::format!(
            "y is {:?}, expected [{}, {}]",
            y.shape(),
            config.s_kv(),
            config.d_embed
        )));
    }
    if x0.dtype() != config.dtype || y.dtype() != config.dtype {
        return Err(Error::DTypeMismatch("inputs must match config dtype".into()));
    }
    Ok(())
}

fn lm_block(x: &Tensor, p: &LmBlockParams) -> Result<Tensor> {
    let (s, e) = (x.shape()[0], x.shape()[1]);
    let xf = x.to_f64_vec();
    let t: Vec<f64> = matmul(&xf, &p.w1.to_f64_vec(), s, e, e).into_iter().map(libm::tanh).collect();
    let mut out = matmul(&t, &p.w2.to_f64_vec(), s, e, e);
    out.iter_mut().zip(&xf).for_each(|(o, &xi)| *o += xi);
    Tensor::from_f64_as(x.dtype(), x.shape(), out)
}

/// Returns `(dx, dW1, dW2)`.
fn lm_block_backward(x: &Tensor, p: &LmBlockParams, g: &Tensor) -> Result<(Tensor, LmBlockGrads)> {
    let (s, e) = (x.shape()[0], x.shape()[1]);
    let (xf, gf) = (x.to_f64_vec(), g.to_f64_vec());
    let (w1, w2) = (p.w1.to_f64_vec(), p.w2.to_f64_vec());
    let t: Vec<f64> = matmul(&xf, &w1, s, e, e).into_iter().map(libm::tanh).collect();
    let dw2 = matmul_tn(&t, &gf, s, e, e);
    let dt = matmul_nt(&gf, &w2, s, e, e);
    let du: Vec<f64> = dt.iter().zip(&t).map(|(&a, &ti)| a * (1.0 - ti * ti)).collect();
    let dw1 = matmul_tn(&xf, &du, s, e, e);
    let mut dx = matmul_nt(&du, &w1, s, e, e);
    dx.iter_mut().zip(&gf).for_each(|(a, &gi)| *a += gi);
    let dt_ = x.dtype();
    Ok((
        Tensor::from_f64_as(dt_, x.shape(), dx)?,
        LmBlockGrads { w1: Tensor::from_f64_as(dt_, &[e, e], dw1)?, w2: Tensor::from_f64_as(dt_, &[e, e], dw2)? },
    ))
}

fn project_flops(rows: usize, config: &ToyMllmConfig) -> u64 {
    2 * rows as u64 * config.d_embed as u64 * (config.h * config.d) as u64
}

pub fn mllm_forward(
    x0: &Tensor,
    y: &Tensor,
    params: &ModelParams,
    config: &ToyMllmConfig,
    policy: ActivationPolicy,
) -> Result<MllmForward> {
    check_inputs(x0, y, params, config)?;
    let opts = KernelOptions::for_head_dim(config.d);
    let (s_q, e, hd) = (config.text_len, config.d_embed, config.h * config.d);
    let mut x = x0.clone();
    let mut saved = SavedActivations {
        policy,
        lm_inputs: Vec::with_capacity(config.num_lm_blocks),
        layers: Vec::with_capacity(config.num_ca_layers()),
    };
    for (block, lm) in params.lm.iter().enumerate() {
        for c in config.layers_before(block) {
            let p = &params.ca[c];
            let q = project(&x, &p.wq, config.h)?;
            let k = project(y, &p.wk, config.h)?;
            let v = project(y, &p.wv, config.h)?;
            let state = blockwise_attention(&q, &k, &v, &opts)?;
            let a = merge_heads(&state.o.to_f64_vec(), s_q, config.h, config.d);
            let mut next = matmul(&a, &p.wo.to_f64_vec(), s_q, hd, e);
            next.iter_mut().zip(x.to_f64_vec()).for_each(|(o, xi)| *o += xi);
            let (k, v) = match policy {
                ActivationPolicy::StoreKV => (Some(k), Some(v)),
                ActivationPolicy::RecomputeKV => (None, None),
            };
            saved.layers.push(SavedLayer { x: Some(x), k, v, o: Some(state.o), l: Some(state.l) });
            x = Tensor::from_f64_as(config.dtype, &[s_q, e], next)?;
        }
        let out = lm_block(&x, lm)?;
        saved.lm_inputs.push(Some(x));
        x = out;
    }
    Ok(MllmForward { output: x, saved, ledger: MemoryLedger::analytic(config, policy) })
}

fn take<'a>(t: &'a Option<Tensor>, layer: usize, tensor: &'static str) -> Result<&'a Tensor> {
    t.as_ref().ok_or(Error::MissingActivation { layer, tensor })
}

pub fn mllm_backward(
    d_out: &Tensor,
    saved: &SavedActivations,
    y: &Tensor,
    params: &ModelParams,
    config: &ToyMllmConfig,
    policy: ActivationPolicy,
) -> Result<MllmBackward> {
    config.validate()?;
    params.check(config)?;
    if saved.policy != policy {
        return Err(Error::InvalidConfig("saved activations come from a different policy".into()));
    }
    if d_out.shape() != [config.text_len, config.d_embed] || d_out.dtype() != config.dtype {
        return Err(Error::ShapeMismatch(alloc::format!("output gradient is {:?}", d_out.shape())));
    }
    if saved.lm_inputs.len() != config.num_lm_blocks || saved.layers.len() != config.num_ca_layers() {
        return Err(Error::ShapeMismatch("saved activation set does not match config".into()));
    }
    let opts = KernelOptions::for_head_dim(config.d);
    let (s_q, e, hd, dt) = (config.text_len, config.d_embed, config.h * config.d, config.dtype);
    let mut ops = OpCount::default();
    let mut g = d_out.clone();
    let mut dy = vec![0.0; config.s_kv() * e];
    let mut lm_grads = Vec::with_capacity(config.num_lm_blocks);
    let mut ca_grads: Vec<Option<CrossAttnGrads>> = vec![None; config.num_ca_layers()];

    for block in (0..config.num_lm_blocks).rev() {
        let x_in = saved.lm_inputs[block].as_ref().ok_or(Error::MissingActivation { layer: block, tensor: "lm_input" })?;
        let (dx, grads) = lm_block_backward(x_in, &params.lm[block], &g)?;
        lm_grads.push(grads);
        g = dx;
        let layers: Vec<usize> = config.layers_before(block).collect();
        for &c in layers.iter().rev() {
            let p = &params.ca[c];
            let s = &saved.layers[c];
            let x = take(&s.x, c, "x")?;
            let o = take(&s.o, c, "O")?;
            let l = take(&s.l, c, "L")?;
            let q = project(x, &p.wq, config.h)?;
            ops.recompute_flops += project_flops(s_q, config);
            let (k, v) = match policy {
                ActivationPolicy::StoreKV => (take(&s.k, c, "K")?.clone(), take(&s.v, c, "V")?.clone()),
                ActivationPolicy::RecomputeKV => {
                    ops.recompute_flops += 2 * project_flops(config.s_kv(), config);
                    (project(y, &p.wk, config.h)?, project(y, &p.wv, config.h)?)
                }
            };

            let gf = g.to_f64_vec();
            let a = merge_heads(&o.to_f64_vec(), s_q, config.h, config.d);
            let dwo = matmul_tn(&a, &gf, s_q, hd, e);
            let da = matmul_nt(&gf, &p.wo.to_f64_vec(), s_q, e, hd);
            let d_o = Tensor::from_f64_as(dt, &[config.h, s_q, config.d], split_heads(&da, s_q, config.h, config.d))?;
            let delta = attention_delta(o, &d_o)?;
            let ag = blockwise_attention_backward(&q, &k, &v, l, &delta, &d_o, opts.scale)?;
            let (dx_q, dwq) = project_backward(x, &p.wq, &ag.dq)?;
            let (dy_k, dwk) = project_backward(y, &p.wk, &ag.dk)?;
            let (dy_v, dwv) = project_backward(y, &p.wv, &ag.dv)?;
            for ((acc, a), b) in dy.iter_mut().zip(dy_k.to_f64_vec()).zip(dy_v.to_f64_vec()) {
                *acc += a + b;
            }
            g = g.add(&dx_q)?;
            ca_grads[c] = Some(CrossAttnGrads { wq: dwq, wk: dwk, wv: dwv, wo: Tensor::from_f64_as(dt, &[hd, e], dwo)? });
        }
    }
    lm_grads.reverse();
    let grads = ModelGradients {
        x0: g,
        y: Tensor::from_f64_as(dt, &[config.s_kv(), e], dy)?,
        lm: lm_grads,
        ca: ca_grads.into_iter().map(|c| c.expect("every layer visited")).collect(),
    };
    Ok(MllmBackward { grads, ops })
}

/// Largest frame count whose analytic `peak_total` fits in `budget_bytes`;
/// 0 when even an empty video does not fit.
pub fn max_frames_under_budget(template: &ToyMllmConfig, policy: ActivationPolicy, budget_bytes: u64) -> Result<usize> {
    template.validate()?;
    if budget_bytes == 0 {
        return Err(Error::InvalidConfig("budget must be positive".into()));
    }
    let fits = |frames: usize| {
        let cfg = ToyMllmConfig { frames, ..template.clone() };
        MemoryLedger::analytic(&cfg, policy).peak_total <= budget_bytes
    };
    if !fits(0) {
        return Ok(0);
    }
    // peak grows by at least y's bytes per frame, so the search is bounded by the budget
    let mut hi = 1usize;
    while fits(hi) {
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
