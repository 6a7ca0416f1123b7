//! Speculative action prefetching.
//!
//! A predictor guesses the next action and the pipeline pre-generates the
//! corresponding frame. On a hit the frame is shown after `t_overhead_ms`; on a
//! miss the speculative frame is discarded and the frame pays the full
//! pipeline latency on top. Speculative work runs on slack capacity and never
//! delays the next real frame.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{self, LatencyStats, SimConfig, SimReport, SpeculationStats};
use crate::trace::ActionTrace;

pub const DEFAULT_OVERHEAD_MS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorKind {
    /// Most frequent continuation of the last `k` actions.
    MarkovK {
        k: usize,
    },
    /// Hit with fixed probability `p`, regardless of the trace.
    ScriptedBernoulli {
        p: f64,
    },
    Oracle,
    AntiOracle,
}

impl PredictorKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            PredictorKind::MarkovK { k } if *k < 1 => {
                Err(Error::InvalidArgument("markov order k must be >= 1".into()))
            }
            PredictorKind::ScriptedBernoulli { p } if !(0.0..=1.0).contains(p) => Err(
                Error::InvalidArgument(format!("hit probability must be in [0,1], got {p}")),
            ),
            _ => Ok(()),
        }
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    /// `markov:K`, `bernoulli:P`, `oracle` or `anti_oracle`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::InvalidArgument(format!("unrecognized predictor {s:?}"));
        let kind = match (name, arg) {
            ("markov", Some(k)) => PredictorKind::MarkovK {
                k: k.parse().map_err(|_| bad())?,
            },
            ("markov", None) => PredictorKind::MarkovK { k: 1 },
            ("bernoulli" | "scripted_bernoulli", Some(p)) => PredictorKind::ScriptedBernoulli {
                p: p.parse().map_err(|_| bad())?,
            },
            ("oracle", None) => PredictorKind::Oracle,
            ("anti_oracle" | "anti-oracle", None) => PredictorKind::AntiOracle,
            _ => return Err(bad()),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorKind::MarkovK { k } => write!(f, "markov:{k}"),
            PredictorKind::ScriptedBernoulli { p } => write!(f, "bernoulli:{p}"),
            PredictorKind::Oracle => f.write_str("oracle"),
            PredictorKind::AntiOracle => f.write_str("anti_oracle"),
        }
    }
}

fn default_overhead() -> f64 {
    DEFAULT_OVERHEAD_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    #[serde(default = "default_overhead")]
    pub t_overhead_ms: f64,
    pub predictor: PredictorKind,
    #[serde(default)]
    pub seed: u64,
}

impl SpecConfig {
    pub fn new(predictor: PredictorKind) -> Self {
        Self {
            t_overhead_ms: DEFAULT_OVERHEAD_MS,
            predictor,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_overhead_ms.is_finite() && self.t_overhead_ms >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "t_overhead_ms must be >= 0, got {}",
                self.t_overhead_ms
            )));
        }
        self.predictor.validate()
    }
}

/// Order-k frequency predictor, updated one observation at a time.
#[derive(Debug, Clone)]
pub struct MarkovPredictor {
    k: usize,
    default_token: String,
    counts: HashMap<Vec<String>, BTreeMap<String, u64>>,
}

impl MarkovPredictor {
    pub fn new(k: usize, alphabet: &[String]) -> Self {
        Self {
            k: k.max(1),
            default_token: alphabet.first().cloned().unwrap_or_default(),
            counts: HashMap::new(),
        }
    }

    /// Predicts the action following `history`, using only transitions
    /// already passed to [`observe`](Self::observe).
    pub fn predict<S: AsRef<str>>(&self, history: &[S]) -> String {
        let Some(last) = history.last() else {
            return self.default_token.clone();
        };
        if history.len() >= self.k {
            let ctx: Vec<String> = history[history.len() - self.k..]
                .iter()
                .map(|s| s.as_ref().to_owned())
                .collect();
            if let Some(next) = self.counts.get(&ctx) {
                // BTreeMap iterates in token order, so the first maximum wins ties.
                let mut best: Option<(&String, u64)> = None;
                for (tok, &c) in next {
                    if best.is_none_or(|(_, bc)| c > bc) {
                        best = Some((tok, c));
                    }
                }
                if let Some((tok, _)) = best {
                    return tok.clone();
                }
            }
        }
        last.as_ref().to_owned()
    }

    /// Records that `next` followed `history`.
    pub fn observe<S: AsRef<str>>(&mut self, history: &[S], next: &str) {
        if history.len() < self.k {
            return;
        }
        let ctx: Vec<String> = history[history.len() - self.k..]
            .iter()
            .map(|s| s.as_ref().to_owned())
            .collect();
        *self
            .counts
            .entry(ctx)
            .or_default()
            .entry(next.to_owned())
            .or_insert(0) += 1;
    }
}

/// Most frequent continuation of the last `k` actions of `history`, counted
/// over `history` itself. Unseen context repeats the last action; an empty
/// history yields the first alphabet token.
pub fn predict<S: AsRef<str>>(history: &[S], k: usize, alphabet: &[String]) -> String {
    let mut model = MarkovPredictor::new(k, alphabet);
    for i in 0..history.len() {
        model.observe(&history[..i], history[i].as_ref());
    }
    model.predict(history)
}

/// Per-frame hit flags for every frame of `actions`. Frame 0 is predicted
/// from an empty history.
pub fn hit_flags(
    predictor: &PredictorKind,
    actions: &[&str],
    alphabet: &[String],
    seed: u64,
) -> Vec<bool> {
    match predictor {
        PredictorKind::Oracle => vec![true; actions.len()],
        PredictorKind::AntiOracle => vec![false; actions.len()],
        PredictorKind::ScriptedBernoulli { p } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..actions.len()).map(|_| rng.gen_bool(*p)).collect()
        }
        PredictorKind::MarkovK { k } => {
            let mut model = MarkovPredictor::new(*k, alphabet);
            let mut flags = Vec::with_capacity(actions.len());
            for i in 0..actions.len() {
                let history = &actions[..i];
                flags.push(model.predict(history) == actions[i]);
                model.observe(history, actions[i]);
            }
            flags
        }
    }
}

/// Fraction of frames after the first whose action was predicted.
pub fn hit_rate(predictor: &PredictorKind, trace: &ActionTrace, seed: u64) -> Result<f64> {
    predictor.validate()?;
    if trace.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "hit rate needs at least 2 frames, got {}",
            trace.len()
        )));
    }
    let flags = hit_flags(predictor, &trace.actions(), trace.alphabet(), seed);
    let hits = flags[1..].iter().filter(|&&h| h).count();
    Ok(hits as f64 / (flags.len() - 1) as f64)
}

/// `p_hit * t_overhead + (1 - p_hit) * (t_sys + t_overhead)`.
pub fn amortized_latency(p_hit: f64, t_sys_ms: f64, t_overhead_ms: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hit) {
        return Err(Error::InvalidArgument(format!(
            "p_hit must be in [0,1], got {p_hit}"
        )));
    }
    if !(t_sys_ms >= 0.0 && t_overhead_ms >= 0.0) {
        return Err(Error::InvalidArgument("durations must be >= 0".into()));
    }
    Ok(p_hit * t_overhead_ms + (1.0 - p_hit) * (t_sys_ms + t_overhead_ms))
}

fn effective_latency(hit: bool, t_sys_ms: f64, t_overhead_ms: f64) -> f64 {
    if hit {
        t_overhead_ms
    } else {
        t_sys_ms + t_overhead_ms
    }
}

/// Adds hit flags and effective latencies to a simulated run.
pub(crate) fn overlay(
    report: &mut SimReport,
    spec: &SpecConfig,
    trace: &ActionTrace,
) -> Result<()> {
    spec.validate()?;
    let n = report.records.len();
    let actions: Vec<&str> = report.records.iter().map(|r| r.action.as_str()).collect();
    let flags = hit_flags(&spec.predictor, &actions, trace.alphabet(), spec.seed);
    let mut latencies = Vec::with_capacity(n);
    for (rec, &hit) in report.records.iter_mut().zip(&flags) {
        let eff = effective_latency(hit, rec.latency_ms(), spec.t_overhead_ms);
        rec.speculative_hit = Some(hit);
        rec.effective_latency_ms = Some(eff);
        latencies.push(eff);
    }
    report.speculation = LatencyStats::from_samples(&latencies).map(|stats| SpeculationStats {
        hit_rate: flags.iter().filter(|&&h| h).count() as f64 / n as f64,
        effective_latency: stats,
    });
    Ok(())
}

/// Simulates the pipeline and applies speculation on top of each frame's
/// simulated input-to-display latency.
pub fn speculative_run(
    sim: &SimConfig,
    spec: &SpecConfig,
    trace: &ActionTrace,
) -> Result<SimReport> {
    let mut cfg = sim.clone();
    cfg.policies.speculation = Some(spec.clone());
    simulator::run(&cfg, Some(trace))
}

/// Speculation outcome with a fixed full-pipeline latency per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculativeReport {
    pub predictor: String,
    pub frames: usize,
    pub hits: usize,
    pub hit_rate: f64,
    pub t_sys_ms: f64,
    pub t_overhead_ms: f64,
    pub effective_latency: LatencyStats,
    /// Closed-form latency at the measured hit rate.
    pub predicted_latency_ms: f64,
    #[serde(skip)]
    pub latencies: Vec<f64>,
    #[serde(skip)]
    pub hit_flags: Vec<bool>,
}

pub fn speculative_run_fixed(
    t_sys_ms: f64,
    spec: &SpecConfig,
    trace: &ActionTrace,
) -> Result<SpeculativeReport> {
    spec.validate()?;
    if trace.is_empty() {
        return Err(Error::InsufficientData("empty trace".into()));
    }
    if !(t_sys_ms.is_finite() && t_sys_ms >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "t_sys must be >= 0, got {t_sys_ms}"
        )));
    }
    let flags = hit_flags(
        &spec.predictor,
        &trace.actions(),
        trace.alphabet(),
        spec.seed,
    );
    let latencies: Vec<f64> = flags
        .iter()
        .map(|&h| effective_latency(h, t_sys_ms, spec.t_overhead_ms))
        .collect();
    let hits = flags.iter().filter(|&&h| h).count();
    let hit_rate = hits as f64 / flags.len() as f64;
    Ok(SpeculativeReport {
        predictor: spec.predictor.to_string(),
        frames: flags.len(),
        hits,
        hit_rate,
        t_sys_ms,
        t_overhead_ms: spec.t_overhead_ms,
        effective_latency: LatencyStats::from_samples(&latencies).expect("non-empty"),
        predicted_latency_ms: amortized_latency(hit_rate, t_sys_ms, spec.t_overhead_ms)?,
        latencies,
        hit_flags: flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate, TraceModel, TraceSpec};

    fn alpha(symbols: &[&str]) -> Vec<String> {
        symbols.iter().map(|s| s.to_string()).collect()
    }

    fn constant_trace(n: usize) -> ActionTrace {
        ActionTrace::from_actions(&vec!["fwd"; n], 38.0).unwrap()
    }

    #[test]
    fn predict_examples() {
        let ab = alpha(&["A", "B", "L"]);
        assert_eq!(predict(&["L", "L", "L", "L"], 1, &ab), "L");
        assert_eq!(predict(&["A", "B", "A", "B", "A"], 1, &ab), "B");
        assert_eq!(predict::<&str>(&[], 1, &ab), "A");
        // unseen context repeats the last action
        assert_eq!(predict(&["A", "B"], 2, &ab), "B");
        // A->B once, A->L once: smallest token wins
        assert_eq!(predict(&["A", "B", "A", "L", "A"], 1, &ab), "B");
    }

    #[test]
    fn incremental_matches_batch() {
        let trace = generate(
            &TraceSpec {
                alphabet: alpha(&["a", "b", "c"]),
                length: 300,
                model: TraceModel::Persistence { q: 0.3 },
                interval_ms: 1.0,
            },
            9,
        )
        .unwrap();
        let actions = trace.actions();
        for k in 1..=3 {
            let flags = hit_flags(&PredictorKind::MarkovK { k }, &actions, trace.alphabet(), 0);
            for i in 0..actions.len() {
                let batch = predict(&actions[..i], k, trace.alphabet());
                assert_eq!(flags[i], batch == actions[i], "k={k} i={i}");
            }
        }
    }

    #[test]
    fn amortized_examples() {
        let l = amortized_latency(0.93, 38.0, 0.1).unwrap();
        assert!((l - 2.76).abs() < 1e-12, "{l}");
        assert!((amortized_latency(1.0, 38.0, 0.1).unwrap() - 0.1).abs() < 1e-12);
        assert!((amortized_latency(0.0, 38.0, 0.1).unwrap() - 38.1).abs() < 1e-12);
        assert!(matches!(
            amortized_latency(1.2, 38.0, 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn hit_rate_constant_trace() {
        let r = hit_rate(&PredictorKind::MarkovK { k: 1 }, &constant_trace(100), 0).unwrap();
        assert_eq!(r, 1.0);
        assert!(matches!(
            hit_rate(&PredictorKind::Oracle, &constant_trace(1), 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn hit_rate_uniform_trace() {
        let trace = generate(
            &TraceSpec {
                alphabet: alpha(&["a", "b", "c", "d"]),
                length: 100_000,
                model: TraceModel::Uniform,
                interval_ms: 1.0,
            },
            4,
        )
        .unwrap();
        let r = hit_rate(&PredictorKind::MarkovK { k: 1 }, &trace, 0).unwrap();
        assert!((r - 0.25).abs() < 0.01, "{r}");
    }

    #[test]
    fn oracle_bounds() {
        let trace = constant_trace(1000);
        let hit =
            speculative_run_fixed(38.0, &SpecConfig::new(PredictorKind::Oracle), &trace).unwrap();
        assert_eq!(hit.effective_latency.mean_ms, 0.1);
        let miss = speculative_run_fixed(38.0, &SpecConfig::new(PredictorKind::AntiOracle), &trace)
            .unwrap();
        assert_eq!(miss.effective_latency.mean_ms, 38.0 + 0.1);
    }

    #[test]
    fn bernoulli_two_point_distribution() {
        let trace = constant_trace(100_000);
        let spec = SpecConfig::new(PredictorKind::ScriptedBernoulli { p: 0.93 });
        let rep = speculative_run_fixed(38.0, &spec, &trace).unwrap();
        assert!(rep.latencies.iter().all(|&l| l == 0.1 || l == 38.0 + 0.1));
        assert!((rep.effective_latency.mean_ms - 2.76).abs() / 2.76 < 0.02);
        assert!((rep.effective_latency.mean_ms - rep.predicted_latency_ms).abs() < 1e-9);
        assert_eq!(rep.effective_latency.p99_ms, 38.1);
        let again = speculative_run_fixed(38.0, &spec, &trace).unwrap();
        assert_eq!(again.hit_flags, rep.hit_flags);
    }

    #[test]
    fn simulated_speculation_sets_flags() {
        let trace = constant_trace(50);
        let sim = SimConfig::new(5, 3, 37.9, 109.4);
        let report = speculative_run(
            &sim,
            &SpecConfig::new(PredictorKind::MarkovK { k: 1 }),
            &trace,
        )
        .unwrap();
        let stats = report.speculation.as_ref().unwrap();
        // only frame 0 misses: the default token equals the constant action
        assert_eq!(stats.hit_rate, 1.0);
        for r in &report.records {
            assert_eq!(r.speculative_hit, Some(true));
            assert_eq!(r.effective_latency_ms, Some(0.1));
        }
    }

    #[test]
    fn parse_predictor() {
        assert_eq!(
            "markov:2".parse::<PredictorKind>().unwrap(),
            PredictorKind::MarkovK { k: 2 }
        );
        assert_eq!(
            "bernoulli:0.93".parse::<PredictorKind>().unwrap(),
            PredictorKind::ScriptedBernoulli { p: 0.93 }
        );
        assert!("markov:0".parse::<PredictorKind>().is_err());
        assert!("bernoulli:2".parse::<PredictorKind>().is_err());
        assert!("lstm".parse::<PredictorKind>().is_err());
    }
}
