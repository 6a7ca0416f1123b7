//! Discrete-event simulation of the asynchronous two-stage pipeline.
//!
//! The DiT group is a single server: sequence parallelism synchronizes all of
//! its devices every step, so it processes one frame at a time. Finished
//! latents are handed to decode worker `frame mod n_vae` (round robin) or to
//! all workers at once (spatial). A worker accepts one frame at a time; the DiT
//! group holds a finished latent until the host-to-device copy can land on a
//! free worker, which is what back-pressures the DiT stage when decoding is
//! the bottleneck.
//!
//! The clock is integer nanoseconds. Events at equal times are ordered by
//! frame id, then by event kind.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extrapolation::ExtrapolationPolicy;
use crate::io::write_atomic;
use crate::perfmodel::VaeParallelism;
use crate::speculation::SpecConfig;
use crate::trace::ActionTrace;

/// Action used when no trace is supplied.
pub const SYNTHETIC_ACTION: &str = "idle";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalModel {
    /// An input is always waiting when the DiT group frees up.
    #[default]
    Saturated,
    /// Inputs arrive at the trace timestamps.
    Timed,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<u64>,
    /// No DiT step starts at or after this simulated time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_ms: Option<f64>,
}

impl Horizon {
    pub fn frames(n: u64) -> Self {
        Self {
            frames: Some(n),
            time_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policies {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speculation: Option<SpecConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrapolation: Option<ExtrapolationPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_dit: u32,
    pub n_vae: u32,
    pub t_dit_ms: f64,
    /// Single-worker decode time for one frame.
    pub t_vae_ms: f64,
    #[serde(default)]
    pub vae_mode: VaeParallelism,
    /// Copy cost paid at the DiT-to-decoder and decoder-to-display hops.
    #[serde(default)]
    pub transfer_overhead_ms: f64,
    #[serde(default)]
    pub arrivals: ArrivalModel,
    #[serde(default)]
    pub policies: Policies,
    #[serde(default)]
    pub horizon: Horizon,
}

impl SimConfig {
    pub fn new(n_dit: u32, n_vae: u32, t_dit_ms: f64, t_vae_ms: f64) -> Self {
        Self {
            n_dit,
            n_vae,
            t_dit_ms,
            t_vae_ms,
            vae_mode: VaeParallelism::RoundRobin,
            transfer_overhead_ms: 0.0,
            arrivals: ArrivalModel::Saturated,
            policies: Policies::default(),
            horizon: Horizon::default(),
        }
    }

    pub fn with_frames(mut self, frames: u64) -> Self {
        self.horizon.frames = Some(frames);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dit < 1 || self.n_vae < 1 {
            return Err(Error::InvalidConfig("n_dit and n_vae must be >= 1".into()));
        }
        for (name, v) in [
            ("t_dit_ms", self.t_dit_ms),
            ("t_vae_ms", self.t_vae_ms),
            ("transfer_overhead_ms", self.transfer_overhead_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if let Some(t) = self.horizon.time_ms {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "horizon.time_ms must be >= 0, got {t}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub action: String,
    pub t_input: f64,
    /// Absent when the frame was extrapolated instead of generated.
    pub t_dit_start: Option<f64>,
    pub t_dit_end: Option<f64>,
    /// When the DiT group released the latent to the decoder.
    pub t_handoff: f64,
    pub t_decode_start: f64,
    pub t_decode_end: f64,
    pub t_display: f64,
    /// Decode worker; `None` when every worker shares the frame.
    pub vae_worker: Option<u32>,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speculative_hit: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_latency_ms: Option<f64>,
}

impl FrameRecord {
    /// Input-to-display latency.
    pub fn latency_ms(&self) -> f64 {
        self.t_display - self.t_input
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles. `None` for an empty sample.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            let idx = (p * sorted.len() as f64).ceil() as usize;
            sorted[idx.clamp(1, sorted.len()) - 1]
        };
        Some(Self {
            mean_ms: compensated_sum(samples) / samples.len() as f64,
            p50_ms: rank(0.50),
            p99_ms: rank(0.99),
        })
    }
}

/// Neumaier summation; keeps means of repeated constants exact.
pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculationStats {
    pub hit_rate: f64,
    pub effective_latency: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub n_vae: u32,
    /// Frames excluded from steady-state statistics.
    pub warmup_frames: u64,
    pub fps: Option<f64>,
    pub effective_interval_ms: Option<f64>,
    pub latency: Option<LatencyStats>,
    pub dit_utilization: f64,
    pub worker_utilization: Vec<f64>,
    pub skip_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speculation: Option<SpeculationStats>,
    pub records: Vec<FrameRecord>,
}

fn to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

fn to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    DecodeDone,
    Handoff,
    DitDone,
    Arrival,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: u64,
    frame: u64,
    kind: EventKind,
}

#[derive(Debug, Clone, Default)]
struct Partial {
    t_input: u64,
    dit: Option<(u64, u64)>,
    handoff: u64,
    decode: (u64, u64),
    worker: Option<u32>,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    actions: Vec<String>,
    arrivals: Option<Vec<u64>>,
    skip: Vec<bool>,
    frame_limit: u64,
    time_limit: Option<u64>,
    queue: BinaryHeap<Reverse<Event>>,
    waiting: VecDeque<u64>,
    dit_free: bool,
    next_frame: u64,
    worker_free_at: Vec<u64>,
    worker_busy: Vec<u64>,
    dit_busy: u64,
    frames: Vec<Partial>,
    t_dit: u64,
    t_decode: u64,
    transfer: u64,
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: u64, frame: u64, kind: EventKind) {
        self.queue.push(Reverse(Event { time, frame, kind }));
    }

    fn input_available(&self, now: u64) -> Option<u64> {
        if self.next_frame >= self.frame_limit {
            return None;
        }
        if let Some(limit) = self.time_limit {
            if now >= limit {
                return None;
            }
        }
        match self.arrivals {
            None => Some(self.next_frame),
            Some(_) => self.waiting.front().copied(),
        }
    }

    fn try_start(&mut self, now: u64) {
        if !self.dit_free {
            return;
        }
        let Some(frame) = self.input_available(now) else {
            return;
        };
        if self.arrivals.is_some() {
            self.waiting.pop_front();
        }
        self.next_frame += 1;
        self.dit_free = false;
        let idx = frame as usize;
        let t_input = match &self.arrivals {
            None => now,
            Some(times) => times[idx],
        };
        let duration = if self.skip[idx] { 0 } else { self.t_dit };
        self.frames.push(Partial {
            t_input,
            dit: (!self.skip[idx]).then_some((now, now + duration)),
            ..Partial::default()
        });
        self.dit_busy += duration;
        self.push(now + duration, frame, EventKind::DitDone);
    }

    fn dit_done(&mut self, now: u64, frame: u64) {
        // The copy may start early so that it lands exactly when the worker frees up.
        let ready = match self.cfg.vae_mode {
            VaeParallelism::RoundRobin => {
                let k = (frame % u64::from(self.cfg.n_vae)) as usize;
                self.worker_free_at[k]
            }
            VaeParallelism::Spatial => self.worker_free_at.iter().copied().max().unwrap_or(0),
        };
        let handoff = now.max(ready.saturating_sub(self.transfer));
        self.push(handoff, frame, EventKind::Handoff);
    }

    fn handoff(&mut self, now: u64, frame: u64) {
        let start = now + self.transfer;
        let end = start + self.t_decode;
        let worker = match self.cfg.vae_mode {
            VaeParallelism::RoundRobin => {
                let k = (frame % u64::from(self.cfg.n_vae)) as usize;
                self.worker_free_at[k] = end;
                self.worker_busy[k] += self.t_decode;
                Some(k as u32)
            }
            VaeParallelism::Spatial => {
                for (free, busy) in self.worker_free_at.iter_mut().zip(&mut self.worker_busy) {
                    *free = end;
                    *busy += self.t_decode;
                }
                None
            }
        };
        let rec = &mut self.frames[frame as usize];
        rec.handoff = now;
        rec.decode = (start, end);
        rec.worker = worker;
        self.dit_free = true;
        self.push(end, frame, EventKind::DecodeDone);
        self.try_start(now);
    }

    fn run(&mut self) {
        if let Some(times) = &self.arrivals {
            let arrivals: Vec<(u64, u64)> = times
                .iter()
                .enumerate()
                .take(self.frame_limit as usize)
                .map(|(i, &t)| (t, i as u64))
                .collect();
            for (t, i) in arrivals {
                self.push(t, i, EventKind::Arrival);
            }
        }
        self.try_start(0);
        while let Some(Reverse(ev)) = self.queue.pop() {
            match ev.kind {
                EventKind::Arrival => {
                    self.waiting.push_back(ev.frame);
                    self.try_start(ev.time);
                }
                EventKind::DitDone => self.dit_done(ev.time, ev.frame),
                EventKind::Handoff => self.handoff(ev.time, ev.frame),
                EventKind::DecodeDone => {}
            }
        }
    }
}

/// Runs the pipeline over `trace` (or a synthetic constant-action stream of
/// `horizon.frames` inputs when no trace is given).
pub fn run(config: &SimConfig, trace: Option<&ActionTrace>) -> Result<SimReport> {
    config.validate()?;
    let (actions, timestamps): (Vec<String>, Option<Vec<u64>>) = match trace {
        Some(t) => {
            if t.is_empty() && config.horizon.frames.is_none() && config.horizon.time_ms.is_none() {
                return Err(Error::InvalidConfig("empty trace and no horizon".into()));
            }
            let stamps = t.entries().iter().map(|e| to_ns(e.t_ms.max(0.0))).collect();
            (
                t.entries().iter().map(|e| e.action.clone()).collect(),
                Some(stamps),
            )
        }
        None => {
            let n = match (config.horizon.frames, config.horizon.time_ms) {
                (Some(n), _) => n,
                (None, Some(limit)) => {
                    // enough inputs to saturate the time limit
                    let step = config.t_dit_ms.min(config.t_vae_ms).max(1e-6);
                    (limit / step).ceil() as u64 + 1
                }
                (None, None) => return Err(Error::InvalidConfig("no trace and no horizon".into())),
            };
            (vec![SYNTHETIC_ACTION.to_owned(); n as usize], None)
        }
    };
    let mut frame_limit = actions.len() as u64;
    if let Some(n) = config.horizon.frames {
        frame_limit = frame_limit.min(n);
    }
    let arrivals =
        match config.arrivals {
            ArrivalModel::Saturated => None,
            ArrivalModel::Timed => Some(timestamps.ok_or_else(|| {
                Error::InvalidConfig("timed arrivals require an input trace".into())
            })?),
        };
    let skip = match &config.policies.extrapolation {
        Some(policy) => policy.skip_mask(&actions)?,
        None => vec![false; actions.len()],
    };

    let t_decode_ms = match config.vae_mode {
        VaeParallelism::RoundRobin => config.t_vae_ms,
        VaeParallelism::Spatial => config.t_vae_ms / f64::from(config.n_vae),
    };
    let n_workers = config.n_vae as usize;
    let mut engine = Engine {
        cfg: config,
        actions,
        arrivals,
        skip,
        frame_limit,
        time_limit: config.horizon.time_ms.map(to_ns),
        queue: BinaryHeap::new(),
        waiting: VecDeque::new(),
        dit_free: true,
        next_frame: 0,
        worker_free_at: vec![0; n_workers],
        worker_busy: vec![0; n_workers],
        dit_busy: 0,
        frames: Vec::new(),
        t_dit: to_ns(config.t_dit_ms),
        t_decode: to_ns(t_decode_ms),
        transfer: to_ns(config.transfer_overhead_ms),
    };
    engine.run();

    let transfer = engine.transfer;
    let records: Vec<FrameRecord> = engine
        .frames
        .iter()
        .enumerate()
        .map(|(i, p)| FrameRecord {
            frame_id: i as u64,
            action: engine.actions[i].clone(),
            t_input: to_ms(p.t_input),
            t_dit_start: p.dit.map(|d| to_ms(d.0)),
            t_dit_end: p.dit.map(|d| to_ms(d.1)),
            t_handoff: to_ms(p.handoff),
            t_decode_start: to_ms(p.decode.0),
            t_decode_end: to_ms(p.decode.1),
            t_display: to_ms(p.decode.1 + transfer),
            vae_worker: p.worker,
            skipped: engine.skip[i],
            speculative_hit: None,
            effective_latency_ms: None,
        })
        .collect();

    let span_start = engine.frames.first().map_or(0, |p| p.t_input);
    let span_end = engine.frames.iter().map(|p| p.decode.1).max().unwrap_or(0);
    let span = span_end.saturating_sub(span_start);
    let frac = |busy: u64| {
        if span == 0 {
            0.0
        } else {
            busy as f64 / span as f64
        }
    };
    let skipped = records.iter().filter(|r| r.skipped).count();

    let mut report = SimReport {
        n_vae: config.n_vae,
        warmup_frames: u64::from(config.n_vae),
        fps: None,
        effective_interval_ms: None,
        latency: None,
        dit_utilization: frac(engine.dit_busy),
        worker_utilization: engine.worker_busy.iter().map(|&b| frac(b)).collect(),
        skip_rate: if records.is_empty() {
            0.0
        } else {
            skipped as f64 / records.len() as f64
        },
        speculation: None,
        records,
    };
    report.latency = LatencyStats::from_samples(
        &steady_records(&report)
            .iter()
            .map(|r| r.latency_ms())
            .collect::<Vec<_>>(),
    );
    if let Ok(fps) = steady_state_fps(&report) {
        report.fps = Some(fps);
        report.effective_interval_ms = Some(1000.0 / fps);
    }

    if let (Some(spec), Some(trace)) = (&config.policies.speculation, trace) {
        crate::speculation::overlay(&mut report, spec, trace)?;
    }
    Ok(report)
}

fn steady_records(report: &SimReport) -> &[FrameRecord] {
    let warm = (report.warmup_frames as usize).min(report.records.len());
    &report.records[warm..]
}

/// Frames per second after the warm-up frames: frames displayed after the
/// last warm-up frame divided by the time elapsed since it was displayed.
pub fn steady_state_fps(report: &SimReport) -> Result<f64> {
    let n = report.records.len() as u64;
    let needed = 2 * u64::from(report.n_vae).max(1);
    if n < needed.max(2) {
        return Err(Error::InsufficientData(format!(
            "{n} frames simulated, need at least {}",
            needed.max(2)
        )));
    }
    let warm = report.warmup_frames.clamp(1, n - 1) as usize;
    let first = report.records[warm - 1].t_display;
    let last = report.records[n as usize - 1].t_display;
    let elapsed = last - first;
    if elapsed <= 0.0 {
        return Err(Error::InsufficientData(
            "zero elapsed time in steady state".into(),
        ));
    }
    Ok((n as usize - warm) as f64 / elapsed * 1000.0)
}

/// One bar of the timing chart.
#[derive(Debug, Clone, PartialEq)]
pub struct GanttRow {
    pub frame_id: u64,
    pub stage: &'static str,
    pub worker: String,
    pub start_ms: f64,
    pub end_ms: f64,
}

fn stage_rank(stage: &str) -> u8 {
    match stage {
        "dit" => 0,
        "transfer" => 1,
        _ => 2,
    }
}

pub fn gantt_rows(report: &SimReport) -> Vec<GanttRow> {
    let mut rows = Vec::new();
    for r in &report.records {
        let worker = match r.vae_worker {
            Some(k) => format!("vae{k}"),
            None => "vae*".to_owned(),
        };
        if let (Some(s), Some(e)) = (r.t_dit_start, r.t_dit_end) {
            rows.push(GanttRow {
                frame_id: r.frame_id,
                stage: "dit",
                worker: "dit".to_owned(),
                start_ms: s,
                end_ms: e,
            });
        }
        if r.t_decode_start > r.t_handoff {
            rows.push(GanttRow {
                frame_id: r.frame_id,
                stage: "transfer",
                worker: worker.clone(),
                start_ms: r.t_handoff,
                end_ms: r.t_decode_start,
            });
        }
        rows.push(GanttRow {
            frame_id: r.frame_id,
            stage: "decode",
            worker,
            start_ms: r.t_decode_start,
            end_ms: r.t_decode_end,
        });
    }
    rows.sort_by(|a, b| {
        a.start_ms
            .total_cmp(&b.start_ms)
            .then(a.frame_id.cmp(&b.frame_id))
            .then(stage_rank(a.stage).cmp(&stage_rank(b.stage)))
    });
    rows
}

pub fn gantt_csv(report: &SimReport) -> String {
    let mut out = String::from("frame_id,stage,worker,start_ms,end_ms\n");
    for row in gantt_rows(report) {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            row.frame_id, row.stage, row.worker, row.start_ms, row.end_ms
        );
    }
    out
}

pub fn gantt_export(report: &SimReport, path: &Path) -> Result<()> {
    write_atomic(path, gantt_csv(report).as_bytes())
}
