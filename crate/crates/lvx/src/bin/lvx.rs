use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lvx_core::analytics::{
    self, classify_regime, linear_grid, log_grid, memory_cross_attention, round_times, speedup, sweep, table_speedup,
    HardwareSpec, Preset, WorkloadSpec,
};
use lvx_core::mllm::{
    max_frames_under_budget, mllm_backward, mllm_forward, ActivationPolicy, MemoryLedger, ModelParams, ToyMllmConfig,
};
use lvx_core::rng::{seeded_random_tensor_stream, Seed};
use lvx_core::DType;
use lvx::driver::{account, parse_strategy, run_distributed, AttentionInputs, RunOptions};
use lvx::io::{create_dir, read_json, store_tensor, write_json};
use lvx::runtime::{ClusterOptions, Transport};
use lvx::verify::{run_suite, Suite};
use lvx::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "lvx", version, about = "Distributed cross-attention engine: runs, verification, cost models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy on an in-process cluster, or predict its traffic.
    Run(RunArgs),
    /// Run an invariant suite and print its JSON report.
    Verify(VerifyArgs),
    /// Per-round times, speedup, regime and memory for one workload.
    Cost(CostArgs),
    /// Speedup over a grid of (S_Q, S_KV) as CSV.
    Sweep(SweepArgs),
    /// Forward and backward of the toy cross-attention model, or its frame capacity.
    Mllm(MllmArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Numeric,
    AccountingOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportKind {
    Instant,
    Throttled,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Exactness,
    Gradients,
    Volumes,
    Mllm,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Store,
    Recompute,
}

impl From<PolicyArg> for ActivationPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Store => ActivationPolicy::StoreKV,
            PolicyArg::Recompute => ActivationPolicy::RecomputeKV,
        }
    }
}

#[derive(Args)]
struct ShapeArgs {
    /// Named scenario: video-mme-llama3v, owl3-3600frames, llama3v-20min.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    sq: Option<f64>,
    #[arg(long)]
    skv: Option<f64>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Worker count (defaults to 16 for presets, 1 otherwise).
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct HardwareArgs {
    /// Per-worker FLOP/s.
    #[arg(long, default_value_t = 312e12)]
    flops: f64,
    /// Link bandwidth in bytes/s.
    #[arg(long, default_value_t = 25e9)]
    bandwidth: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "lvx")]
    strategy: String,
    #[command(flatten)]
    shape: ShapeArgs,
    /// f32 or f64 (accounting-only also accepts f16 and bf16).
    #[arg(long, default_value = "f64")]
    dtype: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Numeric)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = TransportKind::Instant)]
    transport: TransportKind,
    /// Throttled link bandwidth in bytes/s.
    #[arg(long, default_value_t = 25e9)]
    bandwidth: f64,
    /// Throttled per-message latency in seconds.
    #[arg(long, default_value_t = 0.0)]
    latency: f64,
    /// Used to model compute time per round.
    #[arg(long, default_value_t = 312e12)]
    flops: f64,
    /// Also run the backward pass.
    #[arg(long)]
    backward: bool,
    #[arg(long, default_value = "lvx-out")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(value_enum)]
    suite: SuiteArg,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// Element type: f16, bf16, f32 or f64.
    #[arg(long, default_value = "bf16")]
    dtype: String,
    #[command(flatten)]
    hw: HardwareArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid as lo:hi:log or lo:hi:lin, optionally followed by :points.
    #[arg(long)]
    sq: String,
    #[arg(long)]
    skv: String,
    /// Points per axis when a grid spec omits them.
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 32)]
    h: usize,
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value = "bf16")]
    dtype: String,
    #[command(flatten)]
    hw: HardwareArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MllmArgs {
    /// Model configuration JSON.
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Recompute)]
    policy: PolicyArg,
    /// Report the largest frame count fitting in this many bytes instead of running.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write gradient tensors here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Usage and configuration problems exit 2, failed checks and runtime failures exit 1.
enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Json { .. } => Failure::Usage(e.to_string()),
            Error::Core(
                lvx_core::Error::InvalidConfig(_)
                | lvx_core::Error::HeadsNotDivisible { .. }
                | lvx_core::Error::NoWorkers
                | lvx_core::Error::ShapeMismatch(_),
            ) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

impl From<lvx_core::Error> for Failure {
    fn from(e: lvx_core::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(field: &'static str, reason: impl Into<String>) -> Failure {
    Error::config(field, reason).into()
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(value: &serde_json::Value) {
    emit(&format!("{}\n", serde_json::to_string_pretty(value).expect("JSON values serialize")));
}

fn elem_bytes(dtype: &str) -> CliResult<u64> {
    match dtype {
        "f16" | "bf16" => Ok(2),
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(usage("dtype", format!("unknown dtype '{}' (f16, bf16, f32, f64)", other))),
    }
}

fn numeric_dtype(dtype: &str) -> CliResult<DType> {
    match dtype {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(usage("dtype", format!("numeric runs support f32 and f64, got '{}'", other))),
    }
}

fn positive_count(field: &'static str, v: f64) -> CliResult<u64> {
    if !(v >= 1.0 && v.is_finite() && v.fract() == 0.0) {
        return Err(usage(field, format!("must be a positive integer, got {}", v)));
    }
    Ok(v as u64)
}

fn positive(field: &'static str, v: f64) -> CliResult<f64> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(usage(field, format!("must be positive, got {}", v)));
    }
    Ok(v)
}

fn workload(shape: &ShapeArgs, elem_bytes: u64) -> CliResult<WorkloadSpec> {
    let mut w = match &shape.preset {
        Some(name) => Preset::from_name(name)
            .ok_or_else(|| usage("preset", format!("unknown preset '{}'", name)))?
            .workload(elem_bytes),
        None => {
            let need = |v: Option<f64>, f: &'static str| v.ok_or_else(|| usage(f, "required without --preset"));
            WorkloadSpec {
                s_q: positive_count("sq", need(shape.sq, "sq")?)?,
                s_kv: positive_count("skv", need(shape.skv, "skv")?)?,
                heads: positive_count("h", need(shape.h.map(|v| v as f64), "h")?)?,
                head_dim: positive_count("d", need(shape.d.map(|v| v as f64), "d")?)?,
                workers: 1,
                elem_bytes,
            }
        }
    };
    if shape.preset.is_some() {
        let overrides = [("sq", shape.sq), ("skv", shape.skv)];
        for (field, v) in overrides {
            if let Some(v) = v {
                let v = positive_count(field, v)?;
                if field == "sq" {
                    w.s_q = v;
                } else {
                    w.s_kv = v;
                }
            }
        }
        if let Some(h) = shape.h {
            w.heads = positive_count("h", h as f64)?;
        }
        if let Some(d) = shape.d {
            w.head_dim = positive_count("d", d as f64)?;
        }
    }
    if let Some(n) = shape.n {
        w.workers = positive_count("n", n as f64)?;
    }
    Ok(w)
}

fn hardware(hw: &HardwareArgs) -> CliResult<HardwareSpec> {
    Ok(HardwareSpec { gpu_flops: positive("flops", hw.flops)?, net_bandwidth: positive("bandwidth", hw.bandwidth)? })
}

fn cmd_run(args: RunArgs) -> CliResult {
    let kind = parse_strategy(&args.strategy)?;
    let transport = match args.transport {
        TransportKind::Instant => Transport::Instant,
        TransportKind::Throttled => Transport::Throttled { bandwidth: args.bandwidth, latency: args.latency },
    };
    transport.validate()?;
    let hw = HardwareSpec { gpu_flops: positive("flops", args.flops)?, net_bandwidth: positive("bandwidth", args.bandwidth)? };
    let stats_path = args.out.join("stats.json");
    match args.mode {
        Mode::AccountingOnly => {
            let w = workload(&args.shape, elem_bytes(&args.dtype)?)?;
            let report = account(kind, &w, &transport, &hw)?;
            create_dir(&args.out)?;
            write_json(&stats_path, &report)?;
            print_json(&json!({
                "mode": "accounting-only",
                "stats": stats_path,
                "strategy": kind.name(),
                "workload": w,
                "forward_bytes": report.forward.total_bytes,
                "backward_bytes": report.backward.total_bytes,
                "forward_volume_ratio_lvx_ring": report.forward_volume_ratio_lvx_ring,
                "forward_volume_ratio_rounded": report.forward_volume_ratio_lvx_ring.map(|r| format!("{:.4}", r)),
                "forward_volume_ratio_percent": report.forward_volume_ratio_display,
            }));
        }
        Mode::Numeric => {
            if args.shape.preset.is_some() {
                return Err(usage("mode", "preset workloads are paper scale; use --mode accounting-only"));
            }
            let dtype = numeric_dtype(&args.dtype)?;
            let w = workload(&args.shape, dtype.size_bytes() as u64)?;
            kind.validate(w.heads as usize, w.workers as usize)?;
            let inputs =
                AttentionInputs::generate(w.s_q as usize, w.s_kv as usize, w.heads as usize, w.head_dim as usize, dtype, args.seed)?;
            let mut opts = RunOptions::new(kind, w.workers as usize, w.head_dim as usize);
            opts.cluster = ClusterOptions::new(transport);
            opts.backward = args.backward;
            opts.hardware = hw;
            let run = run_distributed(&inputs, &opts)?;
            create_dir(&args.out)?;
            let mut files = vec![("o", &run.state.o), ("l", &run.state.l)];
            if let Some(g) = &run.grads {
                files.extend([("dq", &g.dq), ("dk", &g.dk), ("dv", &g.dv)]);
            }
            let mut written = Vec::new();
            for (name, t) in files {
                let path = args.out.join(format!("{}.lvxt", name));
                store_tensor(&path, t)?;
                written.push(path);
            }
            let stats = json!({
                "strategy": kind.name(),
                "workload": w,
                "dtype": dtype,
                "seed": args.seed,
                "transport": transport,
                "forward": run.forward,
                "backward": run.backward,
            });
            write_json(&stats_path, &stats)?;
            print_json(&json!({
                "mode": "numeric",
                "stats": stats_path,
                "tensors": written,
                "forward_bytes": run.forward.total_bytes,
                "backward_bytes": run.backward.as_ref().map(|b| b.total_bytes),
            }));
        }
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> CliResult {
    let suite = match args.suite {
        SuiteArg::Exactness => Suite::Exactness,
        SuiteArg::Gradients => Suite::Gradients,
        SuiteArg::Volumes => Suite::Volumes,
        SuiteArg::Mllm => Suite::Mllm,
    };
    let report = run_suite(suite).map_err(|e| Failure::Check(e.to_string()))?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    emit(&format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")));
    if report.passed {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(Failure::Check(format!("{} of {} checks failed in suite {}", failed, report.checks.len(), suite.name())))
    }
}

fn cmd_cost(args: CostArgs) -> CliResult {
    let mut shape = args.shape;
    if shape.preset.is_some() && shape.n.is_none() {
        shape.n = Some(16);
    }
    let w = workload(&shape, elem_bytes(&args.dtype)?)?;
    let hw = hardware(&args.hw)?;
    let d_model = w.heads * w.head_dim;
    let mem = memory_cross_attention(w.s_q, w.s_kv, d_model, w.elem_bytes);
    let volume_ratio = if w.workers > 1 { Some(analytics::forward_volume_ratio(&w)?) } else { None };
    print_json(&json!({
        "workload": w,
        "hardware": hw,
        "round_times": round_times(&w, &hw),
        "speedup": speedup(&w, &hw),
        "table_speedup": table_speedup(&w, &hw),
        "regime": classify_regime(&w, &hw),
        "forward_volume_ratio_lvx_ring": volume_ratio,
        "memory": {
            "d_model": d_model,
            "kv_bytes": mem.kv_bytes,
            "kv_gib": mem.kv_bytes as f64 / analytics::GIB,
            "flash_working_set_bytes": mem.flash_working_set_bytes,
            "flash_working_set_gib": mem.flash_working_set_bytes as f64 / analytics::GIB,
        },
    }));
    Ok(())
}

fn parse_grid(field: &'static str, spec: &str, default_points: usize) -> CliResult<Vec<u64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if !(parts.len() == 3 || parts.len() == 4) {
        return Err(usage(field, format!("expected lo:hi:log|lin[:points], got '{}'", spec)));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| usage(field, format!("'{}' is not a number", s)));
    let (lo, hi) = (positive(field, num(parts[0])?)?, positive(field, num(parts[1])?)?);
    let points = match parts.get(3) {
        Some(p) => p.parse::<usize>().ok().filter(|&p| p > 0).ok_or_else(|| usage(field, format!("bad point count '{}'", p)))?,
        None => default_points,
    };
    let grid = match parts[2] {
        "log" => log_grid(lo, hi, points),
        "lin" | "linear" => linear_grid(lo, hi, points),
        other => return Err(usage(field, format!("unknown spacing '{}' (log, lin)", other))),
    };
    grid.map_err(|e| usage(field, e.to_string()))
}

/// `%g` with six significant digits.
fn fmt_g6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", x);
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-4..6).contains(&exp) {
        format!("{}e{}{:02}", trim(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        trim(format!("{:.*}", (5 - exp) as usize, x))
    }
}

fn cmd_sweep(args: SweepArgs) -> CliResult {
    let sq = parse_grid("sq", &args.sq, args.points)?;
    let skv = parse_grid("skv", &args.skv, args.points)?;
    let base = WorkloadSpec {
        s_q: 1,
        s_kv: 1,
        heads: positive_count("h", args.h as f64)?,
        head_dim: positive_count("d", args.d as f64)?,
        workers: positive_count("n", args.n as f64)?,
        elem_bytes: elem_bytes(&args.dtype)?,
    };
    let hw = hardware(&args.hw)?;
    let rows = sweep(&sq, &skv, &base, &hw)?;
    let mut csv = String::from("s_q,s_kv,speedup_fwd,speedup_bwd,quadrant\n");
    for r in rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.s_q, r.s_kv, fmt_g6(r.speedup_fwd), fmt_g6(r.speedup_bwd), r.quadrant.label()));
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv).map_err(|source| Error::Io { path: path.clone(), source })?,
        None => emit(&csv),
    }
    Ok(())
}

fn cmd_mllm(args: MllmArgs) -> CliResult {
    let config: ToyMllmConfig = read_json(&args.config)?;
    config.validate()?;
    let policy: ActivationPolicy = args.policy.into();
    if let Some(budget) = args.budget {
        if budget == 0 {
            return Err(usage("budget", "must be positive"));
        }
        let frames = max_frames_under_budget(&config, policy, budget)?;
        let fixed = MemoryLedger::analytic(&ToyMllmConfig { frames: 0, ..config.clone() }, policy).peak_total;
        print_json(&json!({
            "policy": policy,
            "budget_bytes": budget,
            "fixed_bytes": fixed,
            "max_frames": frames,
            "ledger_at_max": MemoryLedger::analytic(&ToyMllmConfig { frames, ..config.clone() }, policy),
        }));
        return Ok(());
    }
    let (s, e, dt) = (config.text_len, config.d_embed, config.dtype);
    let seed = Seed(args.seed);
    let x0 = seeded_random_tensor_stream(seed, 100, &[s, e], dt, 1.0)?;
    let y = if config.s_kv() == 0 {
        lvx_core::Tensor::zeros(dt, &[0, e])?
    } else {
        seeded_random_tensor_stream(seed, 101, &[config.s_kv(), e], dt, 1.0)?
    };
    let d_out = seeded_random_tensor_stream(seed, 102, &[s, e], dt, 1.0)?;
    let params = ModelParams::random(&config, seed)?;
    let run = |policy| -> CliResult<_> {
        let f = mllm_forward(&x0, &y, &params, &config, policy)?;
        let b = mllm_backward(&d_out, &f.saved, &y, &params, &config, policy)?;
        Ok((f, b))
    };
    let (fwd, bwd) = run(policy)?;
    let other = match policy {
        ActivationPolicy::StoreKV => ActivationPolicy::RecomputeKV,
        ActivationPolicy::RecomputeKV => ActivationPolicy::StoreKV,
    };
    let (_, other_bwd) = run(other)?;
    let mut worst = 0.0f64;
    for ((_, a), (_, b)) in bwd.grads.named().into_iter().zip(other_bwd.grads.named()) {
        worst = worst.max(a.max_abs_diff(b) / a.max_abs().max(f64::MIN_POSITIVE));
    }
    let mut files = Vec::new();
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        for (name, t) in bwd.grads.named() {
            let path = dir.join(format!("{}.lvxt", name));
            store_tensor(&path, t)?;
            files.push(path);
        }
        store_tensor(&dir.join("output.lvxt"), &fwd.output)?;
    }
    print_json(&json!({
        "policy": policy,
        "ledger": fwd.ledger,
        "measured_saved_bytes": fwd.saved.measured_bytes(),
        "recompute_flops": bwd.ops.recompute_flops,
        "gradient_check": {
            "against_policy": other,
            "max_relative_difference": worst,
            "tolerance": lvx::verify::POLICY_TOL,
            "passed": worst <= lvx::verify::POLICY_TOL,
        },
        "gradient_files": files,
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Mllm(a) => cmd_mllm(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("lvx: {}", msg);
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("lvx: {}", msg);
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g6_formatting() {
        assert_eq!(fmt_g6(18.1034), "18.1034");
        assert_eq!(fmt_g6(1.0), "1");
        assert_eq!(fmt_g6(123456789.0), "1.23457e+08");
        assert_eq!(fmt_g6(0.000123456789), "0.000123457");
        assert_eq!(fmt_g6(0.0000123456), "1.23456e-05");
        assert_eq!(fmt_g6(999999.7), "1e+06");
    }

    #[test]
    fn grid_specs() {
        assert_eq!(parse_grid("sq", "1e3:1e6:log", 4).ok().unwrap(), [1000, 10000, 100000, 1000000]);
        assert_eq!(parse_grid("sq", "1:9:lin:5", 20).ok().unwrap(), [1, 3, 5, 7, 9]);
        assert!(parse_grid("sq", "1:9", 20).is_err());
        assert!(parse_grid("sq", "0:9:log", 20).is_err());
    }
}
