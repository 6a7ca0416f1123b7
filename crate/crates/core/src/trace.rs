//! Timestamped action streams.
//!
//! On disk a trace is JSON Lines, one `{"t_ms": f64, "action": string}` record
//! per line.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub t_ms: f64,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrace {
    entries: Vec<TraceEntry>,
    alphabet: Vec<String>,
}

impl ActionTrace {
    /// Builds a trace whose alphabet is the sorted set of observed actions.
    pub fn new(entries: Vec<TraceEntry>) -> Result<Self> {
        let alphabet: BTreeSet<String> = entries.iter().map(|e| e.action.clone()).collect();
        Self::with_alphabet(entries, alphabet.into_iter().collect())
    }

    pub fn with_alphabet(entries: Vec<TraceEntry>, alphabet: Vec<String>) -> Result<Self> {
        for pair in entries.windows(2) {
            if pair[1].t_ms < pair[0].t_ms {
                return Err(Error::InvalidArgument(format!(
                    "trace timestamps must be non-decreasing ({} after {})",
                    pair[1].t_ms, pair[0].t_ms
                )));
            }
        }
        if let Some(e) = entries.iter().find(|e| !e.t_ms.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite timestamp {}",
                e.t_ms
            )));
        }
        if let Some(e) = entries.iter().find(|e| !alphabet.contains(&e.action)) {
            return Err(Error::UnknownAction(e.action.clone()));
        }
        if alphabet.is_empty() && !entries.is_empty() {
            return Err(Error::InvalidArgument("alphabet must not be empty".into()));
        }
        Ok(Self { entries, alphabet })
    }

    /// Evenly spaced trace from a list of actions.
    pub fn from_actions<S: AsRef<str>>(actions: &[S], interval_ms: f64) -> Result<Self> {
        let entries = actions
            .iter()
            .enumerate()
            .map(|(i, a)| TraceEntry {
                t_ms: i as f64 * interval_ms,
                action: a.as_ref().to_owned(),
            })
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn actions(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.action.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("trace entries serialize");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn parse_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TraceEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceModel {
    /// Keep the previous action; switch to a uniformly chosen different one
    /// with probability `q` per frame.
    Persistence { q: f64 },
    /// Independent uniform draws.
    Uniform,
    /// Cycle through the given actions.
    Scripted { actions: Vec<String> },
}

fn default_interval() -> f64 {
    38.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub alphabet: Vec<String>,
    pub length: usize,
    pub model: TraceModel,
    /// Spacing between consecutive timestamps.
    #[serde(default = "default_interval")]
    pub interval_ms: f64,
}

/// Draws a synthetic trace. Identical spec and seed give an identical trace.
pub fn generate(spec: &TraceSpec, seed: u64) -> Result<ActionTrace> {
    if spec.length < 1 {
        return Err(Error::InvalidArgument("trace length must be >= 1".into()));
    }
    if spec.alphabet.is_empty() {
        return Err(Error::InvalidArgument("alphabet must not be empty".into()));
    }
    if !(spec.interval_ms.is_finite() && spec.interval_ms >= 0.0) {
        return Err(Error::InvalidArgument("interval_ms must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet = &spec.alphabet;
    let actions: Vec<String> = match &spec.model {
        TraceModel::Persistence { q } => {
            if !(0.0..=1.0).contains(q) {
                return Err(Error::InvalidArgument(format!(
                    "q must be in [0,1], got {q}"
                )));
            }
            let mut current = rng.gen_range(0..alphabet.len());
            let mut out = Vec::with_capacity(spec.length);
            out.push(alphabet[current].clone());
            for _ in 1..spec.length {
                if alphabet.len() > 1 && rng.gen_bool(*q) {
                    let offset = rng.gen_range(1..alphabet.len());
                    current = (current + offset) % alphabet.len();
                }
                out.push(alphabet[current].clone());
            }
            out
        }
        TraceModel::Uniform => (0..spec.length)
            .map(|_| alphabet.choose(&mut rng).expect("non-empty").clone())
            .collect(),
        TraceModel::Scripted { actions } => {
            if actions.is_empty() {
                return Err(Error::InvalidArgument(
                    "scripted model needs actions".into(),
                ));
            }
            if let Some(a) = actions.iter().find(|a| !alphabet.contains(a)) {
                return Err(Error::UnknownAction(a.clone()));
            }
            actions.iter().cycle().take(spec.length).cloned().collect()
        }
    };
    let entries = actions
        .into_iter()
        .enumerate()
        .map(|(i, action)| TraceEntry {
            t_ms: i as f64 * spec.interval_ms,
            action,
        })
        .collect();
    ActionTrace::with_alphabet(entries, alphabet.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(model: TraceModel, length: usize, symbols: &[&str]) -> TraceSpec {
        TraceSpec {
            alphabet: symbols.iter().map(|s| s.to_string()).collect(),
            length,
            model,
            interval_ms: 38.0,
        }
    }

    fn switches(trace: &ActionTrace) -> usize {
        trace
            .entries()
            .windows(2)
            .filter(|w| w[0].action != w[1].action)
            .count()
    }

    #[test]
    fn persistence_zero_is_constant() {
        let t = generate(
            &spec(TraceModel::Persistence { q: 0.0 }, 500, &["a", "b", "c"]),
            3,
        )
        .unwrap();
        assert_eq!(switches(&t), 0);
    }

    #[test]
    fn persistence_one_alternates() {
        let t = generate(
            &spec(TraceModel::Persistence { q: 1.0 }, 500, &["a", "b"]),
            3,
        )
        .unwrap();
        assert_eq!(switches(&t), 499);
    }

    #[test]
    fn persistence_switch_rate() {
        let t = generate(
            &spec(
                TraceModel::Persistence { q: 0.07 },
                100_000,
                &["l", "r", "s", "u"],
            ),
            11,
        )
        .unwrap();
        let rate = switches(&t) as f64 / 99_999.0;
        assert!((rate - 0.07).abs() < 0.005, "{rate}");
    }

    #[test]
    fn scripted_cycles() {
        let model = TraceModel::Scripted {
            actions: vec!["a".into(), "b".into()],
        };
        let t = generate(&spec(model, 5, &["a", "b"]), 0).unwrap();
        assert_eq!(t.actions(), vec!["a", "b", "a", "b", "a"]);
        assert_eq!(t.entries()[4].t_ms, 152.0);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&spec(TraceModel::Persistence { q: 1.5 }, 5, &["a"]), 0).is_err());
        assert!(generate(&spec(TraceModel::Uniform, 0, &["a"]), 0).is_err());
        let model = TraceModel::Scripted {
            actions: vec!["z".into()],
        };
        assert!(matches!(
            generate(&spec(model, 3, &["a"]), 0),
            Err(Error::UnknownAction(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let t = generate(&spec(TraceModel::Uniform, 20, &["a", "b"]), 5).unwrap();
        let text = t.to_jsonl();
        let back = ActionTrace::parse_jsonl(&text, Path::new("t.jsonl")).unwrap();
        assert_eq!(back.entries(), t.entries());
        let err =
            ActionTrace::parse_jsonl("{\"t_ms\": 0, \"action\": \"a\"}\n{oops}\n", Path::new("x"))
                .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ActionTrace::parse_jsonl(
            "{\"t_ms\": 5, \"action\": \"a\"}\n{\"t_ms\": 1, \"action\": \"a\"}\n",
            Path::new("x"),
        );
        assert!(err.is_err());
    }
}
