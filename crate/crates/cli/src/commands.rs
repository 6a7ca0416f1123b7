use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use wmpipe::allocator::{self, AllocationPlan, SweepRow};
use wmpipe::extrapolation::{self, DynamicsOracle, Embedding, ExtrapConfig};
use wmpipe::io::{self, PlotKind, PlotSource};
use wmpipe::memcost::{self, Graph, MemCost};
use wmpipe::perfmodel::{self, AlphaBetaFit, EvalModes, Profile, VaeParallelism};
use wmpipe::scenario::{self, AblationReport};
use wmpipe::simulator::{self, LatencyStats, SimConfig, SimReport};
use wmpipe::speculation::{self, PredictorKind, SpecConfig};
use wmpipe::trace::{self, ActionTrace, TraceModel, TraceSpec};
use wmpipe::Error;

use crate::{
    AblationArgs, AllocateArgs, CalibrateArgs, Ctx, ExportArgs, ExtrapolateArgs, Format, FuseArgs,
    FuseExecArgs, GenTraceArgs, ModelMode, SimulateArgs, SpeculateArgs, TraceKind,
};

impl Ctx {
    fn resolve(&self, path: &Path) -> PathBuf {
        self.out_dir.join(path)
    }

    fn format_for(&self, out: Option<&Path>) -> Format {
        if let Some(f) = self.format {
            return f;
        }
        match out.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::Json,
        }
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        let path = self.resolve(path);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        io::write_atomic(&path, text.as_bytes())?;
        Ok(())
    }

    /// Writes the primary output to `out`, or stdout when absent.
    fn emit(&self, out: Option<&Path>, text: &str) -> Result<()> {
        match out {
            Some(p) => self.write(p, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn emit_as<T: Serialize>(
        &self,
        out: Option<&Path>,
        value: &T,
        csv: impl FnOnce() -> String,
    ) -> Result<()> {
        let text = match self.format_for(out) {
            Format::Json => io::to_json(value),
            Format::Csv => csv(),
        };
        self.emit(out, &text)
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("config,split,dit_ms,vae_interval_ms,fps,bottleneck\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3},{:.3},{}",
            r.config(),
            r.split(),
            r.t_dit_ms,
            r.vae_interval_ms,
            r.fps,
            r.stage_label
        );
    }
    out
}

#[derive(Serialize)]
struct AllocateOutput {
    plan: AllocationPlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<Vec<SweepRow>>,
}

pub fn allocate(ctx: &Ctx, args: AllocateArgs) -> Result<()> {
    let profile: Profile = scenario::read_document(&args.profile)?;
    profile.validate()?;
    let modes = match args.mode {
        ModelMode::Profiled => EvalModes::profiled(),
        ModelMode::Analytic => EvalModes::analytic(),
    };
    let (hw, wl) = (&profile.hardware, &profile.workload);
    let rows = allocator::sweep(hw, wl, args.devices, args.min_dit, modes)?;
    let plan = allocator::optimize(hw, wl, args.devices, args.min_dit, modes)?;
    let csv = sweep_csv(&rows);
    let output = AllocateOutput {
        plan,
        sweep: args.sweep.then_some(rows),
    };
    ctx.emit_as(args.out.as_deref(), &output, || csv)
}

#[derive(Serialize)]
struct SimSummary {
    n_dit: u32,
    n_vae: u32,
    frames: usize,
    warmup_frames: u64,
    fps: Option<f64>,
    effective_interval_ms: Option<f64>,
    latency: Option<LatencyStats>,
    dit_utilization: f64,
    worker_utilization: Vec<f64>,
    skip_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    speculation: Option<simulator::SpeculationStats>,
}

impl SimSummary {
    fn new(cfg: &SimConfig, r: &SimReport) -> Self {
        Self {
            n_dit: cfg.n_dit,
            n_vae: r.n_vae,
            frames: r.records.len(),
            warmup_frames: r.warmup_frames,
            fps: r.fps,
            effective_interval_ms: r.effective_interval_ms,
            latency: r.latency,
            dit_utilization: r.dit_utilization,
            worker_utilization: r.worker_utilization.clone(),
            skip_rate: r.skip_rate,
            speculation: r.speculation.clone(),
        }
    }

    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let lat = self.latency;
        format!(
            "n_dit,n_vae,frames,warmup_frames,fps,interval_ms,latency_mean_ms,latency_p50_ms,latency_p99_ms,skip_rate\n\
             {},{},{},{},{},{},{},{},{},{:.6}\n",
            self.n_dit,
            self.n_vae,
            self.frames,
            self.warmup_frames,
            opt(self.fps),
            opt(self.effective_interval_ms),
            opt(lat.map(|l| l.mean_ms)),
            opt(lat.map(|l| l.p50_ms)),
            opt(lat.map(|l| l.p99_ms)),
            self.skip_rate
        )
    }
}

pub fn simulate(ctx: &Ctx, args: SimulateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => scenario::read_document::<SimConfig>(path)?,
        None => {
            // clap guarantees these when no config file is given
            let mut c = SimConfig::new(
                args.n_dit.expect("required"),
                args.n_vae.expect("required"),
                args.t_dit.expect("required"),
                args.t_vae.expect("required"),
            );
            c.transfer_overhead_ms = args.transfer_ms;
            if args.spatial {
                c.vae_mode = VaeParallelism::Spatial;
            }
            c
        }
    };
    if let Some(n) = args.frames {
        cfg.horizon.frames = Some(n);
    }
    if let Some(spec) = cfg.policies.speculation.as_mut() {
        spec.seed = ctx.seed;
    }
    let trace = args.trace.as_deref().map(ActionTrace::read).transpose()?;
    let report = simulator::run(&cfg, trace.as_ref())?;
    if let Some(path) = &args.report {
        ctx.write(path, &io::to_json(&report))?;
    }
    if let Some(path) = &args.gantt {
        ctx.write(path, &simulator::gantt_csv(&report))?;
    }
    let summary = SimSummary::new(&cfg, &report);
    ctx.emit_as(None, &summary, || summary.csv())
}

pub fn speculate(ctx: &Ctx, args: SpeculateArgs) -> Result<()> {
    let predictor: PredictorKind = args.predictor.parse()?;
    let trace = match (&args.trace, args.frames) {
        (Some(path), frames) => {
            let t = ActionTrace::read(path)?;
            match frames {
                Some(n) if n > t.len() => {
                    return Err(invalid(format!(
                        "trace has {} frames, {n} requested",
                        t.len()
                    )))
                }
                Some(n) => {
                    ActionTrace::with_alphabet(t.entries()[..n].to_vec(), t.alphabet().to_vec())?
                }
                None => t,
            }
        }
        (None, Some(n)) => ActionTrace::from_actions(&vec!["idle"; n], args.t_sys)?,
        (None, None) => return Err(invalid("speculate needs --trace or --frames")),
    };
    let spec = SpecConfig {
        t_overhead_ms: args.t_overhead,
        predictor,
        seed: ctx.seed,
    };
    let report = speculation::speculative_run_fixed(args.t_sys, &spec, &trace)?;
    if let Some(path) = &args.report {
        ctx.write(path, &io::to_json(&report))?;
    }
    if let Some(path) = &args.hist {
        ctx.write(
            path,
            &io::plotdata_csv(
                PlotSource::Latencies(&report.latencies),
                PlotKind::LatencyHist,
            )?,
        )?;
    }
    ctx.emit_as(None, &report, || {
        format!(
            "predictor,frames,hits,hit_rate,t_sys_ms,t_overhead_ms,mean_latency_ms,predicted_latency_ms\n{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            report.predictor,
            report.frames,
            report.hits,
            report.hit_rate,
            report.t_sys_ms,
            report.t_overhead_ms,
            report.effective_latency.mean_ms,
            report.predicted_latency_ms
        )
    })
}

#[derive(Serialize)]
struct ExtrapSummary {
    frames: usize,
    hits: usize,
    skip_rate: f64,
    tau: f64,
    lam: f64,
    max_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fps_with_skip: Option<f64>,
}

pub fn extrapolate(ctx: &Ctx, args: ExtrapolateArgs) -> Result<()> {
    let trace = ActionTrace::read(&args.trace)?;
    let embedding = match &args.embedding {
        Some(p) => Embedding::new(scenario::read_document(p)?)?,
        None => Embedding::one_hot(trace.alphabet()),
    };
    let tau = match args.tau.as_str() {
        "auto" => embedding.auto_tau(),
        s => s
            .parse()
            .map_err(|_| invalid(format!("tau must be a number or `auto`, got {s:?}")))?,
    };
    let (oracle, dim) = match args.dynamics.as_str() {
        "constvel" => {
            if args.dim == 0 {
                return Err(invalid("--dim must be >= 1"));
            }
            (
                DynamicsOracle::ConstantVelocity {
                    c: vec![args.velocity; args.dim],
                },
                args.dim,
            )
        }
        path => {
            let oracle: DynamicsOracle = scenario::read_document(Path::new(path))?;
            let dim = match &oracle {
                DynamicsOracle::ConstantVelocity { c } => c.len(),
                DynamicsOracle::Linear { a, .. } => a.len(),
                DynamicsOracle::Scripted { states } => states.first().map_or(0, Vec::len),
            };
            (oracle, dim)
        }
    };
    let config = ExtrapConfig {
        tau,
        lam: args.lam,
        embedding,
        update_v_on_hit: args.update_v_on_hit,
    };
    let run = extrapolation::run_trace(&vec![0.0; dim], &trace.actions(), &config, &oracle)?;
    let fps_with_skip = match args.pipeline.as_deref() {
        Some([t_dit, t_vae, n_vae]) => {
            if n_vae.fract() != 0.0 || *n_vae < 1.0 {
                return Err(invalid(format!(
                    "decoder count must be a positive integer, got {n_vae}"
                )));
            }
            Some(extrapolation::throughput_with_skip(
                *t_dit,
                *t_vae,
                *n_vae as u32,
                run.skip_rate,
            )?)
        }
        _ => None,
    };
    if let Some(path) = &args.report {
        ctx.write(path, &io::to_json(&run))?;
    }
    if let Some(path) = &args.errors {
        let mut csv = String::from("frame,decision,delta,error\n");
        for (i, ((d, delta), err)) in run
            .decisions
            .iter()
            .zip(&run.deltas)
            .zip(&run.errors)
            .enumerate()
        {
            let d = match d {
                extrapolation::Decision::Hit => "hit",
                extrapolation::Decision::Miss => "miss",
            };
            let _ = writeln!(csv, "{i},{d},{delta:.6},{err:.9}");
        }
        ctx.write(path, &csv)?;
    }
    let summary = ExtrapSummary {
        frames: run.decisions.len(),
        hits: run.hits,
        skip_rate: run.skip_rate,
        tau,
        lam: args.lam,
        max_error: run.max_error(),
        fps_with_skip,
    };
    ctx.emit_as(None, &summary, || {
        let fps = summary.fps_with_skip.map(|f| format!("{f:.6}")).unwrap_or_default();
        format!(
            "frames,hits,skip_rate,tau,lambda,max_error,fps_with_skip\n{},{},{:.6},{:.6},{:.6},{:.9},{fps}\n",
            summary.frames, summary.hits, summary.skip_rate, summary.tau, summary.lam, summary.max_error
        )
    })
}

#[derive(Serialize)]
struct FuseSummary {
    s_sram: u64,
    groups: usize,
    fused_groups: usize,
    baseline: MemCost,
    fused: MemCost,
    activation_transactions_before: u64,
    activation_transactions_after: u64,
    transaction_reduction: f64,
    byte_reduction: f64,
    notes: Vec<String>,
}

fn reduction(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        1.0 - after as f64 / before as f64
    }
}

pub fn fuse(ctx: &Ctx, args: FuseArgs) -> Result<()> {
    let graph = Graph::read(&args.graph)?;
    let plan = memcost::plan_fusion(&graph, args.sram)?;
    let baseline = memcost::baseline_cost(&graph);
    let fused = memcost::fused_cost(&graph, &plan)?;
    if let Some(path) = &args.plan {
        ctx.write(path, &io::to_json(&plan))?;
    }
    if let Some(path) = &args.report {
        ctx.write(path, &plan.report_csv())?;
    }
    for note in &plan.notes {
        eprintln!("note: {note}");
    }
    let summary = FuseSummary {
        s_sram: args.sram,
        groups: plan.groups.len(),
        fused_groups: plan.groups.iter().filter(|g| g.nodes.len() > 1).count(),
        activation_transactions_before: baseline.activation_transactions,
        activation_transactions_after: fused.activation_transactions,
        transaction_reduction: reduction(
            baseline.activation_transactions,
            fused.activation_transactions,
        ),
        byte_reduction: reduction(baseline.bytes(), fused.bytes()),
        baseline,
        fused,
        notes: plan.notes.clone(),
    };
    ctx.emit_as(args.out.as_deref(), &summary, || plan.report_csv())
}

pub fn fuse_exec(ctx: &Ctx, args: FuseExecArgs) -> Result<()> {
    if args.rtol.is_nan() || args.rtol < 0.0 {
        return Err(invalid(format!("rtol must be >= 0, got {}", args.rtol)));
    }
    let graph = Graph::read(&args.graph)?;
    let plan = match &args.plan {
        Some(p) => scenario::read_document(p)?,
        None => memcost::plan_fusion(&graph, args.sram)?,
    };
    let inputs = memcost::random_inputs(&graph, ctx.seed);
    // without --check the report is always produced
    let rtol = if args.check { args.rtol } else { f64::INFINITY };
    let report = memcost::check_equivalence(&graph, &inputs, &plan, rtol)?;
    ctx.emit_as(args.out.as_deref(), &report, || {
        format!(
            "elements,max_rel_diff,worst_tensor,worst_index\n{},{:e},{},{}\n",
            report.elements, report.max_rel_diff, report.worst_tensor, report.worst_index
        )
    })
}

fn fit_csv(fit: &AlphaBetaFit) -> String {
    let mut out = format!(
        "# alpha_ms={:.9} beta_ms={:.9}\nn_d,measured_ms,predicted_ms,residual_ms\n",
        fit.alpha_ms, fit.beta_ms
    );
    for r in &fit.residuals {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.n_d, r.measured_ms, r.predicted_ms, r.residual_ms
        );
    }
    out
}

fn parse_sample(s: &str) -> Result<(u32, f64)> {
    let bad = || invalid(format!("sample must look like N:MS, got {s:?}"));
    let (n, t) = s.split_once(':').ok_or_else(bad)?;
    Ok((
        n.trim().parse().map_err(|_| bad())?,
        t.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn calibrate(ctx: &Ctx, args: CalibrateArgs) -> Result<()> {
    let mut samples: Vec<(u32, f64)> = match &args.profile {
        Some(path) => {
            let profile: Profile = scenario::read_document(path)?;
            let dit = profile.workload.profiled_dit.ok_or_else(|| {
                Error::Configuration("profile has no workload.profiled_dit".into())
            })?;
            dit.into_iter().collect()
        }
        None => Vec::new(),
    };
    for s in &args.sample {
        samples.push(parse_sample(s)?);
    }
    let fit = perfmodel::fit_alpha_beta(&samples)?;
    ctx.emit_as(args.out.as_deref(), &fit, || fit_csv(&fit))
}

pub fn ablation(ctx: &Ctx, args: AblationArgs) -> Result<()> {
    let cfg = scenario::load_scenario(&args.scenario)?;
    let report = scenario::run_ablation(&cfg)?;
    if let Some(path) = args.report.as_ref().or(cfg.outputs.report.as_ref()) {
        ctx.write(path, &io::to_json(&report))?;
    }
    if let Some(path) = args.waterfall.as_ref().or(cfg.outputs.waterfall.as_ref()) {
        ctx.write(path, &io::waterfall_csv(&report))?;
    }
    ctx.emit_as(None, &report, || report.to_csv())
}

pub fn gen_trace(ctx: &Ctx, args: GenTraceArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => scenario::read_document::<TraceSpec>(p)?,
        None => TraceSpec {
            alphabet: args.alphabet.clone(),
            length: args.length,
            model: match args.model {
                TraceKind::Persistence => TraceModel::Persistence { q: args.q },
                TraceKind::Uniform => TraceModel::Uniform,
                TraceKind::Scripted => TraceModel::Scripted {
                    actions: args.script.clone(),
                },
            },
            interval_ms: args.interval_ms,
        },
    };
    let trace = trace::generate(&spec, ctx.seed)?;
    ctx.emit(args.out.as_deref(), &trace.to_jsonl())
}

pub fn export(ctx: &Ctx, args: ExportArgs) -> Result<()> {
    let kind: PlotKind = args.kind.parse()?;
    let csv = match kind {
        PlotKind::Waterfall => {
            let report: AblationReport = scenario::read_document(&args.from)?;
            io::plotdata_csv(PlotSource::Ablation(&report), kind)?
        }
        PlotKind::Gantt | PlotKind::LatencyHist => {
            let report: SimReport = scenario::read_document(&args.from)?;
            io::plotdata_csv(PlotSource::Sim(&report), kind)?
        }
    };
    ctx.emit(args.out.as_deref(), &csv)
}
