//! Exact softmax attention over `[heads, rows, cols]` tensors.
//!
//! Every kernel widens its inputs to f64, computes in f64 and rounds the
//! results back to the dtype of `Q`. Partial results travel as an
//! [`AttentionState`]: a normalized output block plus the per-row logsumexp
//! `L = m + ln(l)` of the scaled scores it covers. Two states over disjoint
//! key-value rows combine exactly with [`merge_states`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, matmul_nt, matmul_tn};
use crate::tensor::{DType, Tensor};

pub const DEFAULT_TILE: usize = 64;

pub fn default_scale(head_dim: usize) -> f64 {
    1.0 / libm::sqrt(head_dim as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    pub scale: f64,
    /// Key-value rows per online-softmax tile; clamped to `[1, block rows]`.
    pub tile: usize,
}

impl KernelOptions {
    pub fn for_head_dim(head_dim: usize) -> Self {
        Self { scale: default_scale(head_dim), tile: DEFAULT_TILE }
    }

    pub fn with_scale(scale: f64) -> Self {
        Self { scale, tile: DEFAULT_TILE }
    }
}

/// Partial attention output `o: [h, rows, dv]` with logsumexp statistics `l: [h, rows]`.
///
/// A row whose statistic is −∞ covers no key-value rows and its output is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub o: Tensor,
    pub l: Tensor,
}

impl AttentionState {
    pub fn empty(dtype: DType, heads: usize, rows: usize, value_dim: usize) -> Self {
        Self {
            o: Tensor::zeros(dtype, &[heads, rows, value_dim]).expect("rank 3"),
            l: Tensor::full(dtype, &[heads, rows], f64::NEG_INFINITY).expect("rank 2"),
        }
    }

    pub fn heads(&self) -> usize {
        self.o.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.o.shape()[1]
    }

    pub fn dtype(&self) -> DType {
        self.o.dtype()
    }

    fn check(&self) -> Result<()> {
        let os = self.o.shape();
        let ls = self.l.shape();
        if os.len() != 3 || ls.len() != 2 || os[0] != ls[0] || os[1] != ls[1] {
            return Err(Error::ShapeMismatch(format!("state O {:?} vs L {:?}", os, ls)));
        }
        if self.o.dtype() != self.l.dtype() {
            return Err(Error::DTypeMismatch("state O and L".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

impl GradientBundle {
    pub fn zeros_like(q: &Tensor, k: &Tensor, v: &Tensor) -> Self {
        Self {
            dq: Tensor::zeros(q.dtype(), q.shape()).expect("valid shape"),
            dk: Tensor::zeros(k.dtype(), k.shape()).expect("valid shape"),
            dv: Tensor::zeros(v.dtype(), v.shape()).expect("valid shape"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    heads: usize,
    sq: usize,
    skv: usize,
    d: usize,
    dv: usize,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Dims> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [h, rows, d] tensors, got {:?} {:?} {:?}", qs, ks, vs)));
    }
    if qs[0] != ks[0] || ks[0] != vs[0] {
        return Err(Error::ShapeMismatch(format!("head counts differ: {} {} {}", qs[0], ks[0], vs[0])));
    }
    if qs[2] != ks[2] {
        return Err(Error::ShapeMismatch(format!("query dim {} != key dim {}", qs[2], ks[2])));
    }
    if ks[1] != vs[1] {
        return Err(Error::ShapeMismatch(format!("key rows {} != value rows {}", ks[1], vs[1])));
    }
    if q.dtype() != k.dtype() || k.dtype() != v.dtype() {
        return Err(Error::DTypeMismatch("Q, K and V must share a dtype".into()));
    }
    for (t, name) in [(q, "Q"), (k, "K"), (v, "V")] {
        if !t.is_finite(false) {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(Dims { heads: qs[0], sq: qs[1], skv: ks[1], d: qs[2], dv: vs[2] })
}

fn check_rows(t: &Tensor, name: &str, dims: Dims, cols: Option<usize>) -> Result<()> {
    let ok = match cols {
        Some(c) => t.shape() == [dims.heads, dims.sq, c],
        None => t.shape() == [dims.heads, dims.sq],
    };
    if !ok {
        return Err(Error::ShapeMismatch(format!("{} has shape {:?}", name, t.shape())));
    }
    Ok(())
}

/// Brute-force attention: materializes every score row, subtracts its max,
/// exponentiates and normalizes.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<AttentionState> {
    let dims = check_qkv(q, k, v)?;
    let Dims { heads, sq, skv, d, dv } = dims;
    let (qf, kf, vf) = (q.to_f64_vec(), k.to_f64_vec(), v.to_f64_vec());
    let mut o = vec![0.0; heads * sq * dv];
    let mut l = vec![f64::NEG_INFINITY; heads * sq];
    for h in 0..heads {
        let qh = &qf[h * sq * d..(h + 1) * sq * d];
        let kh = &kf[h * skv * d..(h + 1) * skv * d];
        let vh = &vf[h * skv * dv..(h + 1) * skv * dv];
        let mut scores = matmul_nt(qh, kh, sq, d, skv);
        if skv == 0 {
            continue;
        }
        for i in 0..sq {
            let row = &mut scores[i * skv..(i + 1) * skv];
            row.iter_mut().for_each(|s| *s *= scale);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|s| *s = libm::exp(*s - m));
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
            l[h * sq + i] = m + libm::log(sum);
        }
        let oh = matmul(&scores, vh, sq, skv, dv);
        o[h * sq * dv..(h + 1) * sq * dv].copy_from_slice(&oh);
    }
    let dtype = q.dtype();
    Ok(AttentionState {
        o: Tensor::from_f64_as(dtype, &[heads, sq, dv], o)?,
        l: Tensor::from_f64_as(dtype, &[heads, sq], l)?,
    })
}

/// Attention of `q` against one key-value block, evaluated tile by tile with
/// a running max and running sum per query row.
pub fn blockwise_attention(q: &Tensor, k: &Tensor, v: &Tensor, opts: &KernelOptions) -> Result<AttentionState> {
    let dims = check_qkv(q, k, v)?;
    let Dims { heads, sq, skv, d, dv } = dims;
    let (qf, kf, vf) = (q.to_f64_vec(), k.to_f64_vec(), v.to_f64_vec());
    let tile = opts.tile.clamp(1, skv.max(1));
    let mut o = vec![0.0; heads * sq * dv];
    let mut l = vec![f64::NEG_INFINITY; heads * sq];
    let mut scores = vec![0.0; tile];
    for h in 0..heads {
        let qh = &qf[h * sq * d..(h + 1) * sq * d];
        let kh = &kf[h * skv * d..(h + 1) * skv * d];
        let vh = &vf[h * skv * dv..(h + 1) * skv * dv];
        let mut m = vec![f64::NEG_INFINITY; sq];
        let mut sum = vec![0.0; sq];
        let acc = &mut o[h * sq * dv..(h + 1) * sq * dv];
        let mut t0 = 0;
        while t0 < skv {
            let t1 = (t0 + tile).min(skv);
            for i in 0..sq {
                let qi = &qh[i * d..(i + 1) * d];
                let s = &mut scores[..t1 - t0];
                for (j, sj) in s.iter_mut().enumerate() {
                    let r = t0 + j;
                    *sj = opts.scale * dot(qi, &kh[r * d..(r + 1) * d]);
                }
                let tile_max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m_new = m[i].max(tile_max);
                let row = &mut acc[i * dv..(i + 1) * dv];
                if m[i] != f64::NEG_INFINITY && m[i] != m_new {
                    let corr = libm::exp(m[i] - m_new);
                    sum[i] *= corr;
                    row.iter_mut().for_each(|a| *a *= corr);
                }
                for (j, &sj) in s.iter().enumerate() {
                    let p = libm::exp(sj - m_new);
                    sum[i] += p;
                    let r = t0 + j;
                    for (a, &vv) in row.iter_mut().zip(&vh[r * dv..(r + 1) * dv]) {
                        *a += p * vv;
                    }
                }
                m[i] = m_new;
            }
            t0 = t1;
        }
        if skv > 0 {
            for i in 0..sq {
                acc[i * dv..(i + 1) * dv].iter_mut().for_each(|a| *a /= sum[i]);
                l[h * sq + i] = m[i] + libm::log(sum[i]);
            }
        }
    }
    let dtype = q.dtype();
    Ok(AttentionState {
        o: Tensor::from_f64_as(dtype, &[heads, sq, dv], o)?,
        l: Tensor::from_f64_as(dtype, &[heads, sq], l)?,
    })
}

/// Combines two partial states over disjoint key-value rows.
///
/// Per row: `L = logaddexp(La, Lb)` and `O = e^(La-L)·Oa + e^(Lb-L)·Ob`.
/// Rows empty in both inputs stay empty; the empty state is an exact identity.
pub fn merge_states(a: &AttentionState, b: &AttentionState) -> Result<AttentionState> {
    a.check()?;
    b.check()?;
    if a.o.shape() != b.o.shape() {
        return Err(Error::ShapeMismatch(format!("merge {:?} with {:?}", a.o.shape(), b.o.shape())));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch("merge operands differ".into()));
    }
    let dv = a.o.shape()[2];
    let (oa, ob) = (a.o.to_f64_vec(), b.o.to_f64_vec());
    let (la, lb) = (a.l.to_f64_vec(), b.l.to_f64_vec());
    let mut o = vec![0.0; oa.len()];
    let mut l = vec![f64::NEG_INFINITY; la.len()];
    for r in 0..la.len() {
        let mx = la[r].max(lb[r]);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let lse = mx + libm::log(libm::exp(la[r] - mx) + libm::exp(lb[r] - mx));
        let (wa, wb) = (libm::exp(la[r] - lse), libm::exp(lb[r] - lse));
        for c in r * dv..(r + 1) * dv {
            o[c] = wa * oa[c] + wb * ob[c];
        }
        l[r] = lse;
    }
    let dtype = a.dtype();
    Ok(AttentionState {
        o: Tensor::from_f64_as(dtype, a.o.shape(), o)?,
        l: Tensor::from_f64_as(dtype, a.l.shape(), l)?,
    })
}

/// Per-row `D = Σ_c dO ∘ O`, the correction term of the softmax backward.
pub fn attention_delta(o: &Tensor, d_o: &Tensor) -> Result<Tensor> {
    if o.shape() != d_o.shape() || o.ndim() != 3 {
        return Err(Error::ShapeMismatch(format!("O {:?} vs dO {:?}", o.shape(), d_o.shape())));
    }
    let (heads, rows, dv) = (o.shape()[0], o.shape()[1], o.shape()[2]);
    let (of, gf) = (o.to_f64_vec(), d_o.to_f64_vec());
    let delta = (0..heads * rows).map(|r| dot(&of[r * dv..(r + 1) * dv], &gf[r * dv..(r + 1) * dv])).collect();
    Tensor::from_f64_as(o.dtype(), &[heads, rows], delta)
}

/// Full softmax-attention backward with materialized probability matrices.
pub fn dense_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    o: &Tensor,
    l: &Tensor,
    d_o: &Tensor,
    scale: f64,
) -> Result<GradientBundle> {
    let dims = check_qkv(q, k, v)?;
    check_rows(o, "O", dims, Some(dims.dv))?;
    check_rows(d_o, "dO", dims, Some(dims.dv))?;
    check_rows(l, "L", dims, None)?;
    let Dims { heads, sq, skv, d, dv } = dims;
    let (qf, kf, vf) = (q.to_f64_vec(), k.to_f64_vec(), v.to_f64_vec());
    let (of, lf, gf) = (o.to_f64_vec(), l.to_f64_vec(), d_o.to_f64_vec());
    let mut dq = vec![0.0; qf.len()];
    let mut dk = vec![0.0; kf.len()];
    let mut dvv = vec![0.0; vf.len()];
    for h in 0..heads {
        let qh = &qf[h * sq * d..(h + 1) * sq * d];
        let kh = &kf[h * skv * d..(h + 1) * skv * d];
        let vh = &vf[h * skv * dv..(h + 1) * skv * dv];
        let oh = &of[h * sq * dv..(h + 1) * sq * dv];
        let gh = &gf[h * sq * dv..(h + 1) * sq * dv];
        let mut p = matmul_nt(qh, kh, sq, d, skv);
        for i in 0..sq {
            let li = lf[h * sq + i];
            for s in &mut p[i * skv..(i + 1) * skv] {
                *s = libm::exp(scale * *s - li);
            }
        }
        let dv_h = matmul_tn(&p, gh, sq, skv, dv);
        let dp = matmul_nt(gh, vh, sq, dv, skv);
        let mut ds = vec![0.0; sq * skv];
        for i in 0..sq {
            let di = dot(&oh[i * dv..(i + 1) * dv], &gh[i * dv..(i + 1) * dv]);
            for j in 0..skv {
                ds[i * skv + j] = p[i * skv + j] * (dp[i * skv + j] - di);
            }
        }
        let dq_h = matmul(&ds, kh, sq, skv, d);
        let dk_h = matmul_tn(&ds, qh, sq, skv, d);
        dq[h * sq * d..(h + 1) * sq * d].iter_mut().zip(dq_h).for_each(|(a, b)| *a = scale * b);
        dk[h * skv * d..(h + 1) * skv * d].iter_mut().zip(dk_h).for_each(|(a, b)| *a = scale * b);
        dvv[h * skv * dv..(h + 1) * skv * dv].copy_from_slice(&dv_h);
    }
    let dtype = q.dtype();
    Ok(GradientBundle {
        dq: Tensor::from_f64_as(dtype, q.shape(), dq)?,
        dk: Tensor::from_f64_as(dtype, k.shape(), dk)?,
        dv: Tensor::from_f64_as(dtype, v.shape(), dvv)?,
    })
}

/// Additive gradient contributions of one (query block, key-value block) pair.
///
/// `l` and `delta` must be the final statistics of these query rows over the
/// whole key-value sequence; summing the returned bundles over every
/// key-value block yields the full gradients.
pub fn blockwise_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l: &Tensor,
    delta: &Tensor,
    d_o: &Tensor,
    scale: f64,
) -> Result<GradientBundle> {
    let dims = check_qkv(q, k, v)?;
    check_rows(d_o, "dO", dims, Some(dims.dv))?;
    check_rows(l, "L", dims, None)?;
    check_rows(delta, "D", dims, None)?;
    let Dims { heads, sq, skv, d, dv } = dims;
    let (qf, kf, vf) = (q.to_f64_vec(), k.to_f64_vec(), v.to_f64_vec());
    let (lf, df, gf) = (l.to_f64_vec(), delta.to_f64_vec(), d_o.to_f64_vec());
    let mut dq = vec![0.0; qf.len()];
    let mut dk = vec![0.0; kf.len()];
    let mut dvv = vec![0.0; vf.len()];
    for h in 0..heads {
        for i in 0..sq {
            let qi = &qf[(h * sq + i) * d..(h * sq + i + 1) * d];
            let gi = &gf[(h * sq + i) * dv..(h * sq + i + 1) * dv];
            let (li, di) = (lf[h * sq + i], df[h * sq + i]);
            for j in 0..skv {
                let kr = (h * skv + j) * d;
                let vr = (h * skv + j) * dv;
                let p = libm::exp(scale * dot(qi, &kf[kr..kr + d]) - li);
                let dp = dot(gi, &vf[vr..vr + dv]);
                let ds = scale * p * (dp - di);
                for (a, &g) in dvv[vr..vr + dv].iter_mut().zip(gi) {
                    *a += p * g;
                }
                for c in 0..d {
                    dq[(h * sq + i) * d + c] += ds * kf[kr + c];
                    dk[kr + c] += ds * qi[c];
                }
            }
        }
    }
    let dtype = q.dtype();
    Ok(GradientBundle {
        dq: Tensor::from_f64_as(dtype, q.shape(), dq)?,
        dk: Tensor::from_f64_as(dtype, k.shape(), dk)?,
        dv: Tensor::from_f64_as(dtype, v.shape(), dvv)?,
    })
}

fn check_projection(input: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let (is, ws) = (input.shape(), w.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] {
        return Err(Error::ShapeMismatch(format!("project {:?} by {:?}", is, ws)));
    }
    if input.dtype() != w.dtype() {
        return Err(Error::DTypeMismatch("input and weight differ".into()));
    }
    Ok((is[0], is[1], ws[1]))
}

/// `input[S, e] · w[e, h·d]`, reshaped to `[h, S, d]`.
pub fn project(input: &Tensor, w: &Tensor, heads: usize) -> Result<Tensor> {
    let (s, e, cols) = check_projection(input, w)?;
    if heads == 0 || cols % heads != 0 {
        return Err(Error::ShapeMismatch(format!("{} columns do not split into {} heads", cols, heads)));
    }
    let d = cols / heads;
    let flat = matmul(&input.to_f64_vec(), &w.to_f64_vec(), s, e, cols);
    Tensor::from_f64_as(input.dtype(), &[heads, s, d], split_heads(&flat, s, heads, d))
}

/// Returns `(dInput, dW)` for [`project`] given the output gradient `[h, S, d]`.
pub fn project_backward(input: &Tensor, w: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (s, e, cols) = check_projection(input, w)?;
    let ds = d_out.shape();
    if ds.len() != 3 || ds[1] != s || ds[0] * ds[2] != cols {
        return Err(Error::ShapeMismatch(format!("dOut {:?} for projection to {} columns", ds, cols)));
    }
    let g = merge_heads(&d_out.to_f64_vec(), s, ds[0], ds[2]);
    let d_input = matmul_nt(&g, &w.to_f64_vec(), s, cols, e);
    let d_w = matmul_tn(&input.to_f64_vec(), &g, s, e, cols);
    let dtype = input.dtype();
    Ok((Tensor::from_f64_as(dtype, &[s, e], d_input)?, Tensor::from_f64_as(dtype, &[e, cols], d_w)?))
}

/// `[S, h·d]` → `[h, S, d]`
pub(crate) fn split_heads(flat: &[f64], rows: usize, heads: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; flat.len()];
    for r in 0..rows {
        for h in 0..heads {
            out[(h * rows + r) * d..(h * rows + r + 1) * d]
                .copy_from_slice(&flat[r * heads * d + h * d..r * heads * d + (h + 1) * d]);
        }
    }
    out
}

/// `[h, S, d]` → `[S, h·d]`
pub(crate) fn merge_heads(per_head: &[f64], rows: usize, heads: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; per_head.len()];
    for r in 0..rows {
        for h in 0..heads {
            out[r * heads * d + h * d..r * heads * d + (h + 1) * d]
                .copy_from_slice(&per_head[(h * rows + r) * d..(h * rows + r + 1) * d]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_random_tensor_stream, Seed};

    fn rand(seed: u64, stream: u64, shape: &[usize]) -> Tensor {
        seeded_random_tensor_stream(Seed(seed), stream, shape, DType::F64, 1.0).unwrap()
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.max_abs_diff(b) / b.max_abs().max(1e-300)
    }

    /// Textbook two-pass softmax, one query row at a time, written without
    /// any of the kernel helpers.
    fn naive_two_pass(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> (Vec<f64>, Vec<f64>) {
        let (h, sq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let (skv, dv) = (k.shape()[1], v.shape()[2]);
        let (qf, kf, vf) = (q.to_f64_vec(), k.to_f64_vec(), v.to_f64_vec());
        let mut o = Vec::new();
        let mut l = Vec::new();
        for hh in 0..h {
            for i in 0..sq {
                let s: Vec<f64> = (0..skv)
                    .map(|j| (0..d).map(|c| qf[(hh * sq + i) * d + c] * kf[(hh * skv + j) * d + c]).sum::<f64>() * scale)
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                l.push(m + z.ln());
                for c in 0..dv {
                    o.push((0..skv).map(|j| (s[j] - m).exp() / z * vf[(hh * skv + j) * dv + c]).sum());
                }
            }
        }
        (o, l)
    }

    #[test]
    fn zero_queries_average_values() {
        let q = Tensor::zeros(DType::F64, &[1, 2, 2]).unwrap();
        let k = rand(3, 0, &[1, 3, 2]);
        let v = Tensor::from_f64(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let st = dense_attention(&q, &k, &v, 1.0).unwrap();
        let o = st.o.as_f64().unwrap();
        for row in o.chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-15);
            assert!((row[1] - 5.0).abs() < 1e-15);
        }
        for &l in st.l.as_f64().unwrap() {
            assert!((l - 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = rand(4, 0, &[2, 3, 2]);
        let k = rand(4, 1, &[2, 1, 2]);
        let v = rand(4, 2, &[2, 1, 3]);
        let st = dense_attention(&q, &k, &v, 0.7).unwrap();
        let (qf, kf, vf) = (q.to_f64_vec(), k.to_f64_vec(), v.to_f64_vec());
        for h in 0..2 {
            for i in 0..3 {
                let s = 0.7 * (qf[(h * 3 + i) * 2] * kf[h * 2] + qf[(h * 3 + i) * 2 + 1] * kf[h * 2 + 1]);
                assert!((st.l.as_f64().unwrap()[h * 3 + i] - s).abs() < 1e-15);
                for c in 0..3 {
                    assert_eq!(st.o.as_f64().unwrap()[(h * 3 + i) * 3 + c], vf[h * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn dense_matches_naive_two_pass() {
        let q = rand(7, 0, &[2, 4, 3]);
        let k = rand(7, 1, &[2, 6, 3]);
        let v = rand(7, 2, &[2, 6, 3]);
        let scale = default_scale(3);
        let st = dense_attention(&q, &k, &v, scale).unwrap();
        let (o, l) = naive_two_pass(&q, &k, &v, scale);
        let o_ref = Tensor::from_f64(&[2, 4, 3], o).unwrap();
        let l_ref = Tensor::from_f64(&[2, 4], l).unwrap();
        assert!(rel_err(&st.o, &o_ref) <= 1e-14);
        assert!(rel_err(&st.l, &l_ref) <= 1e-14);
    }

    #[test]
    fn shape_errors() {
        let q = rand(1, 0, &[2, 4, 3]);
        let k = rand(1, 1, &[1, 6, 3]);
        let v = rand(1, 2, &[2, 6, 3]);
        assert!(matches!(dense_attention(&q, &k, &v, 1.0), Err(Error::ShapeMismatch(_))));
        let k = rand(1, 1, &[2, 5, 3]);
        assert!(matches!(dense_attention(&q, &k, &v, 1.0), Err(Error::ShapeMismatch(_))));
        let k = rand(1, 1, &[2, 6, 2]);
        assert!(matches!(blockwise_attention(&q, &k, &v, &KernelOptions::with_scale(1.0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn single_block_equals_dense_for_any_tile() {
        let q = rand(8, 0, &[2, 5, 4]);
        let k = rand(8, 1, &[2, 9, 4]);
        let v = rand(8, 2, &[2, 9, 4]);
        let dense = dense_attention(&q, &k, &v, 0.5).unwrap();
        for tile in [1, 2, 3, 9, 64, 1000] {
            let st = blockwise_attention(&q, &k, &v, &KernelOptions { scale: 0.5, tile }).unwrap();
            assert!(rel_err(&st.o, &dense.o) <= 1e-12, "tile {}", tile);
            assert!(rel_err(&st.l, &dense.l) <= 1e-12, "tile {}", tile);
        }
    }

    #[test]
    fn empty_kv_block_is_empty_state() {
        let q = rand(9, 0, &[1, 3, 2]);
        let k = Tensor::zeros(DType::F64, &[1, 0, 2]).unwrap();
        let st = blockwise_attention(&q, &k, &k, &KernelOptions::with_scale(1.0)).unwrap();
        assert_eq!(st, AttentionState::empty(DType::F64, 1, 3, 2));
    }

    #[test]
    fn blocks_of_two_merged_equal_dense() {
        let q = rand(10, 0, &[2, 4, 3]);
        let k = rand(10, 1, &[2, 7, 3]);
        let v = rand(10, 2, &[2, 7, 3]);
        let opts = KernelOptions::for_head_dim(3);
        let dense = dense_attention(&q, &k, &v, opts.scale).unwrap();
        let mut acc = AttentionState::empty(DType::F64, 2, 4, 3);
        for start in (0..7).step_by(2) {
            let r = start..(start + 2).min(7);
            let part = blockwise_attention(&q, &k.slice_axis(1, r.clone()).unwrap(), &v.slice_axis(1, r).unwrap(), &opts).unwrap();
            acc = merge_states(&acc, &part).unwrap();
        }
        assert!(rel_err(&acc.o, &dense.o) <= 1e-12);
        assert!(rel_err(&acc.l, &dense.l) <= 1e-12);
    }

    #[test]
    fn merge_identity_and_symmetry() {
        let q = rand(11, 0, &[1, 3, 2]);
        let k = rand(11, 1, &[1, 4, 2]);
        let v = rand(11, 2, &[1, 4, 2]);
        let opts = KernelOptions::with_scale(1.0);
        let a = blockwise_attention(&q, &k.slice_axis(1, 0..1).unwrap(), &v.slice_axis(1, 0..1).unwrap(), &opts).unwrap();
        let b = blockwise_attention(&q, &k.slice_axis(1, 1..4).unwrap(), &v.slice_axis(1, 1..4).unwrap(), &opts).unwrap();
        let empty = AttentionState::empty(DType::F64, 1, 3, 2);
        assert!(merge_states(&empty, &a).unwrap().o.bit_eq(&a.o));
        assert!(merge_states(&empty, &a).unwrap().l.bit_eq(&a.l));
        assert!(merge_states(&a, &empty).unwrap().o.bit_eq(&a.o));
        let ab = merge_states(&a, &b).unwrap();
        let ba = merge_states(&b, &a).unwrap();
        assert!(rel_err(&ab.o, &ba.o) <= 1e-15);
        assert!(rel_err(&ab.l, &ba.l) <= 1e-15);
        let ee = merge_states(&empty, &empty).unwrap();
        assert_eq!(ee, empty);
    }

    #[test]
    fn three_way_merge_orders_agree_with_dense() {
        let q = rand(12, 0, &[2, 3, 4]);
        let k = rand(12, 1, &[2, 9, 4]);
        let v = rand(12, 2, &[2, 9, 4]);
        let opts = KernelOptions::for_head_dim(4);
        let dense = dense_attention(&q, &k, &v, opts.scale).unwrap();
        let parts: Vec<_> = [0..2, 2..6, 6..9]
            .into_iter()
            .map(|r| blockwise_attention(&q, &k.slice_axis(1, r.clone()).unwrap(), &v.slice_axis(1, r).unwrap(), &opts).unwrap())
            .collect();
        let left = merge_states(&merge_states(&parts[0], &parts[1]).unwrap(), &parts[2]).unwrap();
        let right = merge_states(&parts[0], &merge_states(&parts[1], &parts[2]).unwrap()).unwrap();
        for st in [&left, &right] {
            assert!(rel_err(&st.o, &dense.o) <= 1e-12);
            assert!(rel_err(&st.l, &dense.l) <= 1e-12);
        }
    }

    #[test]
    fn merge_shape_mismatch() {
        let a = AttentionState::empty(DType::F64, 1, 3, 2);
        let b = AttentionState::empty(DType::F64, 1, 2, 2);
        assert!(merge_states(&a, &b).is_err());
    }

    #[test]
    fn f32_inputs_stay_f32() {
        let q = rand(13, 0, &[1, 3, 2]).cast(DType::F32);
        let k = rand(13, 1, &[1, 4, 2]).cast(DType::F32);
        let st = blockwise_attention(&q, &k, &k, &KernelOptions::with_scale(1.0)).unwrap();
        assert_eq!(st.dtype(), DType::F32);
        assert_eq!(st.l.dtype(), DType::F32);
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let q = rand(14, 0, &[1, 3, 2]);
        let k = rand(14, 1, &[1, 5, 2]);
        let v = rand(14, 2, &[1, 5, 2]);
        let st = dense_attention(&q, &k, &v, 1.0).unwrap();
        let zero = Tensor::zeros(DType::F64, &[1, 3, 2]).unwrap();
        let g = dense_attention_backward(&q, &k, &v, &st.o, &st.l, &zero, 1.0).unwrap();
        for t in [&g.dq, &g.dk, &g.dv] {
            assert_eq!(t.max_abs(), 0.0);
        }
        let delta = attention_delta(&st.o, &zero).unwrap();
        let g = blockwise_attention_backward(&q, &k, &v, &st.l, &delta, &zero, 1.0).unwrap();
        for t in [&g.dq, &g.dk, &g.dv] {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn backward_single_key_saturated_softmax() {
        let q = rand(15, 0, &[1, 3, 2]);
        let k = rand(15, 1, &[1, 1, 2]);
        let v = rand(15, 2, &[1, 1, 2]);
        let d_o = rand(15, 3, &[1, 3, 2]);
        let st = dense_attention(&q, &k, &v, 1.0).unwrap();
        let g = dense_attention_backward(&q, &k, &v, &st.o, &st.l, &d_o, 1.0).unwrap();
        let gf = d_o.to_f64_vec();
        let colsum = [gf[0] + gf[2] + gf[4], gf[1] + gf[3] + gf[5]];
        let dv = g.dv.as_f64().unwrap();
        assert!((dv[0] - colsum[0]).abs() < 1e-14 && (dv[1] - colsum[1]).abs() < 1e-14);
        assert!(g.dq.max_abs() < 1e-15);
        assert!(g.dk.max_abs() < 1e-15);
    }

    /// Central-difference gradient of `<dO, attention(Q, K, V).o>`.
    fn finite_difference(q: &Tensor, k: &Tensor, v: &Tensor, d_o: &Tensor, scale: f64, which: usize) -> Vec<f64> {
        let step = 1e-6;
        let gf = d_o.to_f64_vec();
        let loss = |q: &Tensor, k: &Tensor, v: &Tensor| -> f64 {
            let (o, _) = naive_two_pass(q, k, v, scale);
            o.iter().zip(&gf).map(|(a, b)| a * b).sum()
        };
        let base = [q, k, v][which];
        let mut out = Vec::new();
        for idx in 0..base.numel() {
            let mut plus = base.to_f64_vec();
            let mut minus = base.to_f64_vec();
            plus[idx] += step;
            minus[idx] -= step;
            let p = Tensor::from_f64(base.shape(), plus).unwrap();
            let m = Tensor::from_f64(base.shape(), minus).unwrap();
            let (lp, lm) = match which {
                0 => (loss(&p, k, v), loss(&m, k, v)),
                1 => (loss(q, &p, v), loss(q, &m, v)),
                _ => (loss(q, k, &p), loss(q, k, &m)),
            };
            out.push((lp - lm) / (2.0 * step));
        }
        out
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let q = rand(16, 0, &[1, 3, 2]);
        let k = rand(16, 1, &[1, 5, 2]);
        let v = rand(16, 2, &[1, 5, 2]);
        let d_o = rand(16, 3, &[1, 3, 2]);
        let scale = default_scale(2);
        let st = dense_attention(&q, &k, &v, scale).unwrap();
        let g = dense_attention_backward(&q, &k, &v, &st.o, &st.l, &d_o, scale).unwrap();
        for (which, grad) in [&g.dq, &g.dk, &g.dv].into_iter().enumerate() {
            let fd = finite_difference(&q, &k, &v, &d_o, scale, which);
            let an = grad.to_f64_vec();
            let norm = an.iter().map(|x| x.abs()).fold(0.0, f64::max);
            for (a, f) in an.iter().zip(&fd) {
                assert!((a - f).abs() <= 1e-5 * norm.max(1e-8), "grad {} analytic {} fd {}", which, a, f);
            }
        }
    }

    #[test]
    fn block_backward_sums_to_dense() {
        let q = rand(17, 0, &[2, 4, 3]);
        let k = rand(17, 1, &[2, 7, 3]);
        let v = rand(17, 2, &[2, 7, 3]);
        let d_o = rand(17, 3, &[2, 4, 3]);
        let scale = default_scale(3);
        let st = dense_attention(&q, &k, &v, scale).unwrap();
        let dense = dense_attention_backward(&q, &k, &v, &st.o, &st.l, &d_o, scale).unwrap();
        let delta = attention_delta(&st.o, &d_o).unwrap();
        let whole = blockwise_attention_backward(&q, &k, &v, &st.l, &delta, &d_o, scale).unwrap();
        assert!(rel_err(&whole.dq, &dense.dq) <= 1e-12);

        let mut dq = Tensor::zeros(DType::F64, q.shape()).unwrap();
        let mut dks = Vec::new();
        let mut dvs = Vec::new();
        for r in [0..3, 3..7] {
            let g = blockwise_attention_backward(
                &q,
                &k.slice_axis(1, r.clone()).unwrap(),
                &v.slice_axis(1, r).unwrap(),
                &st.l,
                &delta,
                &d_o,
                scale,
            )
            .unwrap();
            dq = dq.add(&g.dq).unwrap();
            dks.push(g.dk);
            dvs.push(g.dv);
        }
        assert!(rel_err(&dq, &dense.dq) <= 1e-12);
        assert!(rel_err(&Tensor::concat(1, &dks).unwrap(), &dense.dk) <= 1e-12);
        assert!(rel_err(&Tensor::concat(1, &dvs).unwrap(), &dense.dv) <= 1e-12);
    }

    #[test]
    fn identity_projection_is_reshape() {
        let x = rand(18, 0, &[3, 4]);
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
        let w = Tensor::from_f64(&[4, 4], eye).unwrap();
        let p = project(&x, &w, 2).unwrap();
        assert_eq!(p.shape(), &[2, 3, 2]);
        let xf = x.to_f64_vec();
        let pf = p.to_f64_vec();
        for s in 0..3 {
            for h in 0..2 {
                for c in 0..2 {
                    assert_eq!(pf[(h * 3 + s) * 2 + c], xf[s * 4 + h * 2 + c]);
                }
            }
        }
    }

    #[test]
    fn projection_backward_matches_finite_differences() {
        let x = rand(19, 0, &[3, 4]);
        let w = rand(19, 1, &[4, 6]);
        let g = rand(19, 2, &[2, 3, 3]);
        let (dx, dw) = project_backward(&x, &w, &g).unwrap();
        let gf = g.to_f64_vec();
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            project(x, w, 2).unwrap().to_f64_vec().iter().zip(&gf).map(|(a, b)| a * b).sum()
        };
        let step = 1e-6;
        for (target, grad) in [(0, &dx), (1, &dw)] {
            let base = if target == 0 { &x } else { &w };
            for idx in 0..base.numel() {
                let mut p = base.to_f64_vec();
                let mut m = base.to_f64_vec();
                p[idx] += step;
                m[idx] -= step;
                let p = Tensor::from_f64(base.shape(), p).unwrap();
                let m = Tensor::from_f64(base.shape(), m).unwrap();
                let fd = if target == 0 { (loss(&p, &w) - loss(&m, &w)) / (2.0 * step) } else { (loss(&x, &p) - loss(&x, &m)) / (2.0 * step) };
                let an = grad.to_f64_vec()[idx];
                assert!((an - fd).abs() <= 1e-5 * an.abs().max(1.0));
            }
        }
        let zero = Tensor::zeros(DType::F64, &[2, 3, 3]).unwrap();
        let (dx, dw) = project_backward(&x, &w, &zero).unwrap();
        assert_eq!(dx.max_abs() + dw.max_abs(), 0.0);
        assert!(project(&x, &rand(1, 1, &[3, 6]), 2).is_err());
    }
}
