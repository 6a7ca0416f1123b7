use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).to_str().unwrap().to_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmpipe"))
        .args(args)
        .output()
        .expect("spawn wmpipe")
}

fn stdout(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn allocate_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    stdout(&[
        "--out-dir",
        d,
        "allocate",
        "--profile",
        &config("cluster_720x480.json"),
        "--out",
        "table.csv",
    ]);
    let text = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("config,split,dit_ms,vae_interval_ms,fps,bottleneck")
    );
    assert_eq!(
        lines.next(),
        Some("2 DiT + 6 VAE,H/15,63.800,18.233,15.674,DiT-Compute")
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn missing_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("cluster_720x480.json")).unwrap())
            .unwrap();
    doc["hardware"].as_object_mut().unwrap().remove("bw_hbm");
    let path = dir.path().join("profile.json");
    fs::write(&path, doc.to_string()).unwrap();
    let out = run(&["allocate", "--profile", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hardware.bw_hbm"), "{}", stderr(&out));
}

#[test]
fn duplicate_key_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("ablation_720x480.json")).unwrap();
    let text = text.replacen("\"n_total\": 8", "\"n_total\": 8, \"n_total\": 8", 1);
    assert!(text.matches("n_total").count() == 2);
    let path = dir.path().join("scenario.json");
    fs::write(&path, text).unwrap();
    let out = run(&["ablation", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.contains("duplicate key") && err.contains("line"),
        "{err}"
    );
}

#[test]
fn no_divisor_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("cluster_720x480.json")).unwrap())
            .unwrap();
    doc["workload"]["h_heads"] = 7.into();
    let path = dir.path().join("profile.json");
    fs::write(&path, doc.to_string()).unwrap();
    let out = run(&[
        "allocate",
        "--profile",
        path.to_str().unwrap(),
        "--devices",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn calibrate_from_samples() {
    let out = stdout(&["calibrate", "--sample", "2:63.8", "--sample", "6:31.6"]);
    let fit: serde_json::Value = serde_json::from_str(&out).unwrap();
    // two points determine the fit: alpha/2 + beta/2 = 63.8, alpha/6 + 5 beta/6 = 31.6
    assert!((fit["alpha_ms"].as_f64().unwrap() - 112.1).abs() < 1e-9);
    assert!((fit["beta_ms"].as_f64().unwrap() - 15.5).abs() < 1e-9);
    let out = run(&["calibrate", "--sample", "3:60.1"]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["calibrate", "--sample", "three"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_trace_persistence_zero_is_constant() {
    let out = stdout(&["--seed", "9", "gen-trace", "--length", "50", "--q", "0"]);
    let actions: Vec<String> = out
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["action"]
                .as_str()
                .unwrap()
                .to_owned()
        })
        .collect();
    assert_eq!(actions.len(), 50);
    assert!(actions.iter().all(|a| a == &actions[0]));
}

#[test]
fn gantt_export_matches_simulator() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    stdout(&[
        "--out-dir",
        d,
        "simulate",
        "--n-dit",
        "2",
        "--n-vae",
        "3",
        "--t-dit",
        "40",
        "--t-vae",
        "100",
        "--frames",
        "30",
        "--report",
        "sim.json",
        "--gantt",
        "gantt.csv",
    ]);
    let sim = dir.path().join("sim.json");
    stdout(&[
        "--out-dir",
        d,
        "export",
        "--kind",
        "gantt",
        "--from",
        sim.to_str().unwrap(),
        "--out",
        "export.csv",
    ]);
    let direct = fs::read(dir.path().join("gantt.csv")).unwrap();
    assert_eq!(fs::read(dir.path().join("export.csv")).unwrap(), direct);

    let hist = stdout(&[
        "export",
        "--kind",
        "latency_hist",
        "--from",
        sim.to_str().unwrap(),
    ]);
    assert!(hist.starts_with("latency_ms,count\n"));
    let out = run(&[
        "export",
        "--kind",
        "waterfall",
        "--from",
        sim.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn waterfall_has_six_stages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    stdout(&[
        "--out-dir",
        d,
        "ablation",
        "--scenario",
        &config("ablation_720x480.json"),
        "--waterfall",
        "w.csv",
    ]);
    let text = fs::read_to_string(dir.path().join("w.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("stage,fps,speedup"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn speculation_histogram_has_two_buckets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    stdout(&[
        "--out-dir",
        d,
        "speculate",
        "--frames",
        "100000",
        "--predictor",
        "bernoulli:0.93",
        "--hist",
        "h.csv",
    ]);
    let text = fs::read_to_string(dir.path().join("h.csv")).unwrap();
    let buckets: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(buckets, ["0.100", "38.100"]);
}

#[test]
fn fuse_writes_plan_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let summary = stdout(&[
        "--out-dir",
        d,
        "fuse",
        "--graph",
        &config("vae_block.json"),
        "--sram",
        "65536",
        "--plan",
        "plan.json",
        "--report",
        "fuse.csv",
    ]);
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["transaction_reduction"].as_f64(), Some(0.75));
    let plan = dir.path().join("plan.json");
    assert!(fs::read_to_string(dir.path().join("fuse.csv"))
        .unwrap()
        .starts_with("group,kind,nodes,"));

    let out = run(&[
        "--seed",
        "3",
        "fuse-exec",
        "--graph",
        &config("vae_block.json"),
        "--plan",
        plan.to_str().unwrap(),
        "--check",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&[
        "fuse-exec",
        "--graph",
        &config("vae_block.json"),
        "--rtol",
        "-1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn extrapolate_constant_trace_hits_after_two_frames() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    stdout(&[
        "gen-trace",
        "--length",
        "100",
        "--q",
        "0",
        "--out",
        trace.to_str().unwrap(),
    ]);
    let out = stdout(&[
        "extrapolate",
        "--trace",
        trace.to_str().unwrap(),
        "--dim",
        "3",
        "--velocity",
        "0.5",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["hits"].as_u64(), Some(98));
    assert_eq!(v["max_error"].as_f64(), Some(0.0));
    let out = run(&[
        "extrapolate",
        "--trace",
        trace.to_str().unwrap(),
        "--tau",
        "wide",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
