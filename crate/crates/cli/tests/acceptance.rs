//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wmpipe::extrapolation::{self, Decision, DynamicsOracle, Embedding, ExtrapConfig};
use wmpipe::memcost::{self, FusionGroup, FusionPlan, Graph, OpKind, OpNode, TensorSpec};
use wmpipe::perfmodel::{self, EvalModes, Profile};
use wmpipe::scenario;
use wmpipe::simulator::{self, SimConfig};
use wmpipe::speculation::amortized_latency;
use wmpipe::trace::{self, TraceModel, TraceSpec};

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn wmpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmpipe"))
        .args(args)
        .output()
        .expect("spawn wmpipe")
}

fn stdout_ok(args: &[&str]) -> Result<String, String> {
    let out = wmpipe(args);
    if !out.status.success() {
        return Err(format!(
            "wmpipe {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8(out.stdout).expect("utf-8 output"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol + 1e-9
}

/// CSV body rows as column-name maps.
fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .zip(l.split(','))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, col: &str) -> f64 {
    row[col].parse().unwrap_or(f64::NAN)
}

fn shipped_profile() -> Profile {
    scenario::read_document(&configs().join("cluster_720x480.json")).expect("shipped profile")
}

fn allocation_table() -> Check {
    let profile = configs().join("cluster_720x480.json");
    let profile = profile.to_str().unwrap();
    let start = Instant::now();
    let csv = stdout_ok(&[
        "allocate",
        "--profile",
        profile,
        "--sweep",
        "--format",
        "csv",
    ])?;
    let plan = stdout_ok(&["allocate", "--profile", profile])?;
    let elapsed = start.elapsed();

    let rows = csv_rows(&csv);
    let fps: Vec<f64> = rows.iter().map(|r| num(r, "fps")).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r["bottleneck"].as_str()).collect();
    ensure(rows.len() == 4, || {
        format!("expected 4 splits, got {}", rows.len())
    })?;
    ensure((15.6 - 0.1..=15.7 + 0.1).contains(&fps[0]), || {
        format!("2+6 fps {}", fps[0])
    })?;
    for (i, target) in [(1, 16.6), (2, 19.4), (3, 18.3)] {
        ensure(within(fps[i], target, 0.1), || {
            format!("row {i} fps {} vs {target}", fps[i])
        })?;
    }
    let expected = ["DiT-Compute", "DiT-Comm", "Balanced", "VAE-Memory"];
    ensure(labels == expected, || format!("labels {labels:?}"))?;
    let plan: serde_json::Value = serde_json::from_str(&plan).map_err(|e| e.to_string())?;
    let chosen = (
        plan["plan"]["n_dit"].as_u64(),
        plan["plan"]["n_vae"].as_u64(),
    );
    ensure(chosen == (Some(5), Some(3)), || {
        format!("optimize chose {chosen:?}")
    })?;
    ensure(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "fps {fps:?}, labels {labels:?}, optimum 5+3, {elapsed:.2?}"
    ))
}

fn sim_vs_model(
    profile: &Profile,
    n_dit: u32,
    n_vae: u32,
    t_dit: f64,
    t_vae: f64,
) -> Result<f64, String> {
    let mut wl = profile.workload.clone();
    wl.profiled_dit = Some([(n_dit, t_dit)].into());
    wl.t_vae_single_ms = Some(t_vae);
    let model = perfmodel::fps(&profile.hardware, &wl, n_dit, n_vae, EvalModes::profiled())
        .map_err(|e| e.to_string())?
        .fps;
    let report = simulator::run(
        &SimConfig::new(n_dit, n_vae, t_dit, t_vae).with_frames(10_000),
        None,
    )
    .map_err(|e| e.to_string())?;
    let sim = simulator::steady_state_fps(&report).map_err(|e| e.to_string())?;
    Ok((sim - model).abs() / model)
}

fn oracle_equivalence() -> Check {
    let profile = shipped_profile();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let dit = profile.workload.profiled_dit.clone().unwrap_or_default();
    let t_vae = profile.workload.t_vae_single_ms.unwrap_or(109.4);
    for (&n_dit, &t) in &dit {
        worst = worst.max(sim_vs_model(&profile, n_dit, 8 - n_dit, t, t_vae)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n_dit = rng.gen_range(1..=8);
        let n_vae = rng.gen_range(1..=8);
        let t_dit = rng.gen_range(5.0..200.0);
        let t_vae = rng.gen_range(5.0..400.0);
        worst = worst.max(sim_vs_model(&profile, n_dit, n_vae, t_dit, t_vae)?);
    }
    let elapsed = start.elapsed();
    ensure(worst <= 0.01, || format!("worst relative gap {worst:.4}"))?;
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "104 configs x 10^4 frames, worst gap {:.2e}, {elapsed:.2?}",
        worst
    ))
}

fn pipeline_timing() -> Check {
    let csv = stdout_ok(&[
        "simulate", "--n-dit", "5", "--n-vae", "3", "--t-dit", "37.9", "--t-vae", "109.4",
        "--frames", "2000", "--format", "csv",
    ])?;
    let row = &csv_rows(&csv)[0];
    let latency = num(row, "latency_mean_ms");
    let interval = num(row, "interval_ms");
    ensure(within(latency, 147.3, 2.0), || format!("latency {latency}"))?;
    ensure(within(interval, 37.9, 0.5), || {
        format!("interval {interval}")
    })?;
    Ok(format!(
        "latency {latency:.2} ms, interval {interval:.2} ms"
    ))
}

fn amortized() -> Check {
    let closed = amortized_latency(0.93, 38.0, 0.1).map_err(|e| e.to_string())?;
    ensure((closed - 2.76).abs() < 1e-12, || {
        format!("closed form {closed}")
    })?;

    let mean = |predictor: &str| -> Result<f64, String> {
        let csv = stdout_ok(&[
            "--seed",
            "11",
            "speculate",
            "--frames",
            "100000",
            "--predictor",
            predictor,
            "--t-sys",
            "38",
            "--t-overhead",
            "0.1",
            "--format",
            "csv",
        ])?;
        Ok(num(&csv_rows(&csv)[0], "mean_latency_ms"))
    };
    let mc = mean("bernoulli:0.93")?;
    ensure((mc - 2.76).abs() / 2.76 <= 0.02, || {
        format!("Monte-Carlo mean {mc}")
    })?;
    let best = mean("oracle")?;
    let worst = mean("anti_oracle")?;
    let lo = amortized_latency(1.0, 38.0, 0.1).map_err(|e| e.to_string())?;
    let hi = amortized_latency(0.0, 38.0, 0.1).map_err(|e| e.to_string())?;
    ensure(best == lo && worst == hi, || {
        format!("bounds {best}/{worst} vs {lo}/{hi}")
    })?;
    Ok(format!(
        "closed form {closed:.4} ms, Monte-Carlo {mc:.4} ms, bounds {best}/{worst} ms"
    ))
}

fn predictor_hit_rate(dir: &Path) -> Check {
    let trace = dir.join("persist.jsonl");
    stdout_ok(&[
        "--seed",
        "5",
        "gen-trace",
        "--alphabet",
        "w,a,s,d",
        "--length",
        "100000",
        "--model",
        "persistence",
        "--q",
        "0.07",
        "--out",
        trace.to_str().unwrap(),
    ])?;
    let csv = stdout_ok(&[
        "speculate",
        "--trace",
        trace.to_str().unwrap(),
        "--predictor",
        "markov:1",
        "--format",
        "csv",
    ])?;
    let rate = num(&csv_rows(&csv)[0], "hit_rate");
    ensure(within(rate, 0.93, 0.01), || format!("hit rate {rate}"))?;
    Ok(format!("order-1 hit rate {rate:.4}"))
}

/// Linear chain on a `[1, 4, 4, 4]` input.
fn chain(kinds: &[OpKind]) -> Graph {
    let mut declared = BTreeMap::new();
    declared.insert("x".to_owned(), TensorSpec::new([1, 4, 4, 4], 2));
    let (mut c, mut h) = (4, 4);
    let mut nodes = Vec::new();
    let mut current = "x".to_owned();
    for (i, &kind) in kinds.iter().enumerate() {
        let mut node = OpNode {
            id: format!("n{i}"),
            kind,
            inputs: vec![current.clone()],
            output: format!("t{i}"),
            weight: None,
            groups: None,
            flops: None,
        };
        match kind {
            OpKind::UpsampleNearest2x => h *= 2,
            OpKind::Conv3x3 => {
                let out = if i % 2 == 0 { 2 } else { 6 };
                node.weight = Some(TensorSpec::new([out, c, 3, 3], 2));
                c = out;
            }
            OpKind::GroupNorm => node.groups = Some(if c % 2 == 0 { 2 } else { 1 }),
            OpKind::ElementwiseAdd => {
                let side = format!("s{i}");
                declared.insert(side.clone(), TensorSpec::new([1, c, h, h], 2));
                node.inputs.push(side);
            }
            _ => {}
        }
        current = node.output.clone();
        nodes.push(node);
    }
    Graph::new(declared, nodes).expect("valid chain")
}

fn fusion_claim() -> Check {
    let graph = configs().join("vae_block.json");
    let out = stdout_ok(&[
        "fuse",
        "--graph",
        graph.to_str().unwrap(),
        "--sram",
        "2097152",
    ])?;
    let v: serde_json::Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let before = v["activation_transactions_before"].as_u64();
    let after = v["activation_transactions_after"].as_u64();
    ensure(before == Some(8) && after == Some(2), || {
        format!("transactions {before:?} -> {after:?}")
    })?;

    let kinds = [
        OpKind::UpsampleNearest2x,
        OpKind::Conv3x3,
        OpKind::GroupNorm,
        OpKind::Silu,
        OpKind::ElementwiseAdd,
    ];
    // every kind sequence up to length 4, sampled sequences at 5 and 6;
    // every grouping of each sequence
    let mut sequences: Vec<Vec<OpKind>> = Vec::new();
    for len in 1..=4u32 {
        for code in 0..kinds.len().pow(len) {
            let mut rest = code;
            sequences.push(
                (0..len)
                    .map(|_| {
                        let k = kinds[rest % kinds.len()];
                        rest /= kinds.len();
                        k
                    })
                    .collect(),
            );
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for len in [5, 6] {
        for _ in 0..300 {
            sequences.push(
                (0..len)
                    .map(|_| kinds[rng.gen_range(0..kinds.len())])
                    .collect(),
            );
        }
    }
    let mut checked = 0u64;
    for seq in &sequences {
        let len = seq.len() as u32;
        {
            let g = chain(seq);
            let base = memcost::baseline_cost(&g);
            let ids: Vec<String> = g.nodes().iter().map(|n| n.id.clone()).collect();
            for mask in 0..1u32 << (len - 1) {
                let mut groups = Vec::new();
                let mut cur = vec![ids[0].clone()];
                for (i, id) in ids.iter().enumerate().skip(1) {
                    if mask & (1 << (i - 1)) != 0 {
                        groups.push(std::mem::take(&mut cur));
                    }
                    cur.push(id.clone());
                }
                groups.push(cur);
                let groups = groups
                    .into_iter()
                    .map(|g| match g.len() {
                        1 => FusionGroup::single(g[0].clone()),
                        _ => FusionGroup::vertical(g, None),
                    })
                    .collect();
                let plan = FusionPlan::from_groups(groups, u64::MAX);
                let fused = memcost::fused_cost(&g, &plan).map_err(|e| e.to_string())?;
                ensure(
                    fused.bytes() <= base.bytes() && fused.transactions() <= base.transactions(),
                    || format!("{seq:?} mask {mask}: fused {fused:?} > baseline {base:?}"),
                )?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "canonical block 8 -> 2 transactions (75%), {checked} chain groupings dominated"
    ))
}

fn tiled_equivalence() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut tiled_groups = 0;
    for seed in 0..50u64 {
        let g = memcost::random_graph(seed, 64);
        // a small budget forces multi-tile execution
        let plan = memcost::plan_fusion(&g, 32 * 1024).map_err(|e| e.to_string())?;
        tiled_groups += plan
            .groups
            .iter()
            .filter(|gr| gr.tile.as_ref().is_some_and(|t| t.n_tiles > 1))
            .count();
        let inputs = memcost::random_inputs(&g, seed);
        let report = memcost::check_equivalence(&g, &inputs, &plan, 1e-5)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        worst = worst.max(report.max_rel_diff);
    }
    let elapsed = start.elapsed();
    ensure(tiled_groups > 0, || {
        "no multi-tile group was exercised".into()
    })?;
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "50 graphs, {tiled_groups} multi-tile groups, max rel diff {worst:.1e}, {elapsed:.2?}"
    ))
}

fn extrapolation_gating() -> Check {
    // dyadic velocities keep the arithmetic exact
    let c = vec![0.5, -0.25, 1.0, 0.125];
    let oracle = DynamicsOracle::ConstantVelocity { c: c.clone() };
    let alphabet = ["w", "a", "s", "d"];
    let steady = vec!["w"; 1000];
    let cfg = ExtrapConfig::one_hot(&alphabet);
    let run = extrapolation::run_trace(&[1.0, 2.0, 3.0, 4.0], &steady, &cfg, &oracle)
        .map_err(|e| e.to_string())?;
    ensure(run.hits == 998, || {
        format!("{} hits on a constant trace", run.hits)
    })?;
    ensure(run.max_error() == 0.0, || {
        format!("trajectory error {}", run.max_error())
    })?;

    let embedding = Embedding::one_hot(&alphabet);
    let gate = ExtrapConfig {
        tau: 1.0,
        lam: 1.0,
        embedding,
        update_v_on_hit: false,
    };
    ensure(gate.tau < 2f64.sqrt(), || {
        "tau must sit below sqrt(2)".into()
    })?;
    let mut violations = 0;
    let mut changes = 0;
    for seed in 0..10_000u64 {
        let spec = TraceSpec {
            alphabet: alphabet.iter().map(|s| s.to_string()).collect(),
            length: 32,
            model: TraceModel::Persistence { q: 0.3 },
            interval_ms: 38.0,
        };
        let actions = trace::generate(&spec, seed)
            .map_err(|e| e.to_string())?
            .actions()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>();
        let run = extrapolation::run_trace(&[0.0; 4], &actions, &gate, &oracle)
            .map_err(|e| e.to_string())?;
        for i in 1..actions.len() {
            if actions[i] != actions[i - 1] {
                changes += 1;
                if run.decisions[i] != Decision::Miss {
                    violations += 1;
                }
            }
        }
    }
    ensure(violations == 0, || {
        format!("{violations} action changes extrapolated")
    })?;
    Ok(format!(
        "error 0 over 998 hits; {changes} action changes, 0 violations"
    ))
}

fn ablation_waterfall() -> Check {
    let scenario = configs().join("ablation_720x480.json");
    let csv = stdout_ok(&[
        "ablation",
        "--scenario",
        scenario.to_str().unwrap(),
        "--format",
        "csv",
    ])?;
    let rows = csv_rows(&csv);
    ensure(rows.len() == 6, || format!("{} rows", rows.len()))?;
    let fps: Vec<f64> = rows.iter().map(|r| num(r, "fps")).collect();
    for (i, target) in [2.1, 4.5, 16.6, 19.4].into_iter().enumerate() {
        ensure(within(fps[i], target, 0.1), || {
            format!("row {i} fps {} vs {target}", fps[i])
        })?;
    }
    for i in [4, 5] {
        ensure((fps[i] - 26.4).abs() / 26.4 <= 0.05, || {
            format!("row {i} fps {} vs 26.4", fps[i])
        })?;
    }
    let latency = num(&rows[5], "metric_ms");
    ensure((latency - 2.76).abs() < 1e-6, || {
        format!("final latency {latency}")
    })?;
    let speedup = num(&rows[5], "speedup");
    ensure(speedup >= 12.0, || format!("speedup {speedup}"))?;
    Ok(format!(
        "fps {:?}, final latency {latency:.2} ms, speedup {speedup:.2}x (extrapolation model {:.2} vs 26.4)",
        fps.iter().map(|f| (f * 10.0).round() / 10.0).collect::<Vec<_>>(),
        fps[4]
    ))
}

fn determinism(dir: &Path) -> Check {
    let cfg = configs();
    let c = |name: &str| cfg.join(name).to_str().unwrap().to_owned();
    let run = |out: &Path| -> Result<Vec<String>, String> {
        let o = out.to_str().unwrap();
        let trace = out.join("trace.jsonl");
        let trace = trace.to_str().unwrap();
        let sim_report = out.join("sim.json");
        let abl_report = out.join("ablation.json");
        let commands: Vec<Vec<String>> = vec![
            vec![
                "gen-trace",
                "--length",
                "5000",
                "--q",
                "0.1",
                "--out",
                "trace.jsonl",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            vec![
                "allocate".into(),
                "--profile".into(),
                c("cluster_720x480.json"),
                "--sweep".into(),
                "--out".into(),
                "table.csv".into(),
            ],
            vec![
                "simulate",
                "--n-dit",
                "5",
                "--n-vae",
                "3",
                "--t-dit",
                "51.5",
                "--t-vae",
                "109.4",
                "--frames",
                "500",
                "--trace",
                trace,
                "--report",
                "sim.json",
                "--gantt",
                "gantt.csv",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            vec![
                "speculate",
                "--trace",
                trace,
                "--predictor",
                "bernoulli:0.9",
                "--report",
                "spec.json",
                "--hist",
                "hist.csv",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            vec![
                "extrapolate",
                "--trace",
                trace,
                "--pipeline",
                "51.5",
                "109.4",
                "3",
                "--report",
                "extrap.json",
                "--errors",
                "errors.csv",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            vec![
                "fuse".into(),
                "--graph".into(),
                c("vae_block.json"),
                "--plan".into(),
                "plan.json".into(),
                "--report".into(),
                "fuse.csv".into(),
                "--out".into(),
                "fuse.json".into(),
            ],
            vec![
                "fuse-exec".into(),
                "--graph".into(),
                c("vae_block.json"),
                "--sram".into(),
                "65536".into(),
                "--check".into(),
                "--out".into(),
                "exec.json".into(),
            ],
            vec![
                "calibrate".into(),
                "--profile".into(),
                c("cluster_720x480.json"),
                "--out".into(),
                "fit.json".into(),
            ],
            vec![
                "ablation".into(),
                "--scenario".into(),
                c("ablation_720x480.json"),
                "--report".into(),
                "ablation.json".into(),
                "--waterfall".into(),
                "waterfall.csv".into(),
            ],
            vec![
                "export".into(),
                "--kind".into(),
                "waterfall".into(),
                "--from".into(),
                abl_report.to_str().unwrap().into(),
                "--out".into(),
                "waterfall_export.csv".into(),
            ],
            vec![
                "export".into(),
                "--kind".into(),
                "gantt".into(),
                "--from".into(),
                sim_report.to_str().unwrap().into(),
                "--out".into(),
                "gantt_export.csv".into(),
            ],
        ];
        let mut stdouts = Vec::new();
        for cmd in commands {
            let mut args = vec![
                "--seed".to_owned(),
                "42".into(),
                "--out-dir".into(),
                o.into(),
            ];
            args.extend(cmd);
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            stdouts.push(stdout_ok(&refs)?);
        }
        Ok(stdouts)
    };
    let (a, b) = (dir.join("run_a"), dir.join("run_b"));
    let out_a = run(&a)?;
    let out_b = run(&b)?;
    ensure(out_a == out_b, || "stdout differs between runs".into())?;
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in &names {
        let fa = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let fb = std::fs::read(b.join(name)).map_err(|e| format!("{name:?}: {e}"))?;
        ensure(fa == fb, || format!("{name:?} differs between runs"))?;
    }
    ensure(names.len() >= 15, || {
        format!("only {} files written", names.len())
    })?;
    Ok(format!(
        "{} output files and 11 stdout streams byte-identical",
        names.len()
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("allocation table", Box::new(allocation_table)),
        ("simulator matches min-rule", Box::new(oracle_equivalence)),
        ("round-robin pipeline timing", Box::new(pipeline_timing)),
        ("amortized speculative latency", Box::new(amortized)),
        (
            "order-1 predictor hit rate",
            Box::new(|| predictor_hit_rate(dir.path())),
        ),
        ("fusion transaction count", Box::new(fusion_claim)),
        ("tiled executor equivalence", Box::new(tiled_equivalence)),
        (
            "extrapolation exactness and gating",
            Box::new(extrapolation_gating),
        ),
        ("ablation waterfall", Box::new(ablation_waterfall)),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
