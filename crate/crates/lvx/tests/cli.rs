use std::path::Path;
use std::process::{Command, Output};

use lvx::io::load_tensor;
use serde_json::Value;

fn lvx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvx")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lvx_run_matches_single_worker() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("lvx"), dir.path().join("single"));
    let shape = ["--sq", "13", "--skv", "29", "--h", "2", "--d", "8", "--seed", "4", "--backward"];
    let mut args = vec!["run", "--strategy", "lvx", "--n", "4", "--out", path(&a)];
    args.extend(shape);
    json(&lvx(&args));
    let mut args = vec!["run", "--strategy", "single", "--out", path(&b)];
    args.extend(shape);
    json(&lvx(&args));
    for name in ["o", "l", "dq", "dk", "dv"] {
        let x = load_tensor(&a.join(format!("{}.lvxt", name))).unwrap();
        let y = load_tensor(&b.join(format!("{}.lvxt", name))).unwrap();
        assert_eq!(x.shape(), y.shape());
        assert!(x.max_abs_diff(&y) <= 1e-12, "{} differs by {}", name, x.max_abs_diff(&y));
    }
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(a.join("stats.json")).unwrap()).unwrap();
    assert!(stats.to_string().contains("bytes_by_class"));
}

#[test]
fn accounting_reports_volume_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&lvx(&[
        "run", "--strategy", "lvx", "--preset", "video-mme-llama3v", "--mode", "accounting-only", "--out", path(dir.path()),
    ]));
    let ratio = v["forward_volume_ratio_lvx_ring"].as_f64().unwrap();
    assert!((3.5e-4..=3.7e-4).contains(&ratio));
    assert_eq!(v["forward_volume_ratio_percent"], "0.04%");
    assert_eq!(v["workload"]["s_kv"], 15_279_944);
    assert!(dir.path().join("stats.json").exists());
}

#[test]
fn indivisible_heads_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lvx(&["run", "--strategy", "head", "--n", "3", "--h", "4", "--sq", "6", "--skv", "6", "--d", "2", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divis"));
}

#[test]
fn unknown_suite_is_usage_error() {
    assert_eq!(lvx(&["verify", "bogus"]).status.code(), Some(2));
}

#[test]
fn verify_volumes_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let v = json(&lvx(&["verify", "volumes", "--report", path(&report)]));
    assert_eq!(v["passed"], true);
    assert!(report.exists());
}

#[test]
fn cost_owl3_memory_and_single_worker() {
    let v = json(&lvx(&["cost", "--preset", "owl3-3600frames", "--dtype", "f32"]));
    assert_eq!(v["memory"]["kv_bytes"], 75_246_796_800u64);
    assert_eq!(v["regime"]["quadrant"], "top-left");
    let v = json(&lvx(&["cost", "--preset", "video-mme-llama3v", "--n", "1"]));
    assert_eq!(v["round_times"]["lvx"]["comm_fwd"], 0.0);
    assert_eq!(v["round_times"]["ring"]["comm_bwd"], 0.0);
}

#[test]
fn sweep_emits_full_grid() {
    let out = lvx(&["sweep", "--sq", "1e3:1e6:log", "--skv", "1e5:1e8:log"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "s_q,s_kv,speedup_fwd,speedup_bwd,quadrant");
    assert_eq!(lines.len(), 401);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
    assert_eq!(lvx(&["sweep", "--sq", "1e3:1e6:cubic", "--skv", "1e5:1e8:log"]).status.code(), Some(2));
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(
        &p,
        r#"{"num_lm_blocks": 3, "ca_positions": [0, 2], "d_embed": 8, "h": 2, "d": 4, "dtype": "f64",
            "frames": 2, "tokens_per_frame": 5, "text_len": 6}"#,
    )
    .unwrap();
    p
}

#[test]
fn mllm_policies_produce_matching_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b) = (dir.path().join("store"), dir.path().join("recompute"));
    let va = json(&lvx(&["mllm", path(&cfg), "--policy", "store", "--out", path(&a)]));
    let vb = json(&lvx(&["mllm", path(&cfg), "--policy", "recompute", "--out", path(&b)]));
    assert_eq!(va["gradient_check"]["passed"], true);
    assert!(va["ledger"]["peak_total"].as_u64() > vb["ledger"]["peak_total"].as_u64());
    let files = va["gradient_files"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        let name = Path::new(f.as_str().unwrap()).file_name().unwrap();
        let x = load_tensor(&a.join(name)).unwrap();
        let y = load_tensor(&b.join(name)).unwrap();
        assert!(x.max_abs_diff(&y) <= 1e-13 * x.max_abs().max(1.0), "{:?}", name);
    }
}

#[test]
fn mllm_budget_below_fixed_cost_fits_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let v = json(&lvx(&["mllm", path(&cfg), "--budget", "16"]));
    assert_eq!(v["max_frames"], 0);
    let v = json(&lvx(&["mllm", path(&cfg), "--budget", "100000000"]));
    assert!(v["max_frames"].as_u64().unwrap() > 0);
}

#[test]
fn malformed_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\"num_lm_blocks\": 3,").unwrap();
    let out = lvx(&["mllm", path(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}
