//! Latent extrapolation with action-divergence gating.
//!
//! While the action stays put, the next latent is advanced along the last
//! motion vector instead of running the world model:
//! `z_t = z_{t-1} + lam * v_{t-1}`. When the embedded action moves by at least
//! `tau`, or no motion vector exists yet, the full model runs and the motion
//! vector is refreshed. The world model itself is stood in for by a
//! [`DynamicsOracle`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Action token to embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(BTreeMap<String, Vec<f64>>);

impl Embedding {
    pub fn new(table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let mut dim = None;
        for (tok, vec) in &table {
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "embedding for {tok:?} is not finite"
                )));
            }
            match dim {
                None => dim = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(Error::InvalidArgument(format!(
                        "embedding for {tok:?} has dimension {}, expected {d}",
                        vec.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(Self(table))
    }

    pub fn one_hot<S: AsRef<str>>(alphabet: &[S]) -> Self {
        let n = alphabet.len();
        Self(
            alphabet
                .iter()
                .enumerate()
                .map(|(i, tok)| {
                    let mut v = vec![0.0; n];
                    v[i] = 1.0;
                    (tok.as_ref().to_owned(), v)
                })
                .collect(),
        )
    }

    pub fn get(&self, token: &str) -> Result<&[f64]> {
        self.0
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownAction(token.to_owned()))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn dim(&self) -> usize {
        self.0.values().next().map_or(0, Vec::len)
    }

    /// Smallest distance between two distinct tokens; `None` with fewer than
    /// two tokens.
    pub fn min_pairwise_distance(&self) -> Option<f64> {
        let vecs: Vec<&Vec<f64>> = self.0.values().collect();
        let mut best: Option<f64> = None;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let d = distance(vecs[i], vecs[j]);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }

    /// Half the minimum pairwise distance, so any change of discrete action
    /// exceeds the threshold.
    pub fn auto_tau(&self) -> f64 {
        self.min_pairwise_distance().map_or(1.0, |d| d / 2.0)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `||embed(a_t) - embed(a_prev)||_2`.
pub fn action_divergence(a_t: &str, a_prev: &str, embedding: &Embedding) -> Result<f64> {
    Ok(distance(embedding.get(a_t)?, embedding.get(a_prev)?))
}

/// Stand-in for the world model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsOracle {
    /// `z' = z + c`.
    ConstantVelocity { c: Vec<f64> },
    /// `z' = A z + B e(a)`; `a` is d x d, `b` is d x e.
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    /// Frame `t` (0-based) produces `states[t]`.
    Scripted { states: Vec<Vec<f64>> },
}

impl DynamicsOracle {
    /// Next latent for frame `frame` given the previous latent and the
    /// embedded action.
    pub fn apply(&self, z: &[f64], action: &[f64], frame: u64) -> Result<Vec<f64>> {
        let d = z.len();
        match self {
            DynamicsOracle::ConstantVelocity { c } => {
                if c.len() != d {
                    return Err(Error::InvalidState(format!(
                        "velocity has dimension {}, latent {d}",
                        c.len()
                    )));
                }
                Ok(z.iter().zip(c).map(|(x, v)| x + v).collect())
            }
            DynamicsOracle::Linear { a, b } => {
                if a.len() != d || a.iter().any(|row| row.len() != d) {
                    return Err(Error::InvalidState(format!("A must be {d}x{d}")));
                }
                if b.len() != d || b.iter().any(|row| row.len() != action.len()) {
                    return Err(Error::InvalidState(format!(
                        "B must be {d}x{}",
                        action.len()
                    )));
                }
                Ok((0..d)
                    .map(|i| {
                        let az: f64 = a[i].iter().zip(z).map(|(x, y)| x * y).sum();
                        let be: f64 = b[i].iter().zip(action).map(|(x, y)| x * y).sum();
                        az + be
                    })
                    .collect())
            }
            DynamicsOracle::Scripted { states } => {
                let s = states.get(frame as usize).ok_or_else(|| {
                    Error::InvalidState(format!("scripted dynamics has no state for frame {frame}"))
                })?;
                if s.len() != d {
                    return Err(Error::InvalidState(format!(
                        "scripted state has dimension {}, latent {d}",
                        s.len()
                    )));
                }
                Ok(s.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub v: Option<Vec<f64>>,
    /// Frames produced so far; 0 for the seed latent.
    pub t: u64,
}

impl LatentState {
    pub fn initial(z: Vec<f64>) -> Self {
        Self { z, v: None, t: 0 }
    }

    fn validate(&self) -> Result<()> {
        if let Some(v) = &self.v {
            if v.len() != self.z.len() {
                return Err(Error::InvalidState(format!(
                    "motion vector has dimension {}, latent {}",
                    v.len(),
                    self.z.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// Extrapolated; the world model was skipped.
    Hit,
    /// Full world-model inference.
    Miss,
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapConfig {
    pub tau: f64,
    #[serde(default = "default_lambda")]
    pub lam: f64,
    pub embedding: Embedding,
    /// Also refresh the motion vector after an extrapolated frame.
    #[serde(default)]
    pub update_v_on_hit: bool,
}

impl ExtrapConfig {
    /// One-hot embedding, `lam = 1` and `tau` at half the minimum distance.
    pub fn one_hot<S: AsRef<str>>(alphabet: &[S]) -> Self {
        let embedding = Embedding::one_hot(alphabet);
        Self {
            tau: embedding.auto_tau(),
            lam: 1.0,
            embedding,
            update_v_on_hit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be >= 0, got {}",
                self.tau
            )));
        }
        if !(self.lam > 0.0 && self.lam <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be in (0, 2], got {}",
                self.lam
            )));
        }
        Ok(())
    }
}

fn gate(delta: f64, has_motion: bool, tau: f64) -> Decision {
    if delta < tau && has_motion {
        Decision::Hit
    } else {
        Decision::Miss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: LatentState,
    pub decision: Decision,
    pub delta: f64,
}

impl StepOutcome {
    /// The latent handed to the decoder.
    pub fn frame(&self) -> &[f64] {
        &self.state.z
    }
}

/// Produces the next latent. `a_prev` is `None` for the first frame.
pub fn step(
    state: &LatentState,
    a_t: &str,
    a_prev: Option<&str>,
    config: &ExtrapConfig,
    oracle: &DynamicsOracle,
) -> Result<StepOutcome> {
    state.validate()?;
    let embedded = config.embedding.get(a_t)?;
    let delta = match a_prev {
        Some(prev) => action_divergence(a_t, prev, &config.embedding)?,
        None => f64::INFINITY,
    };
    let decision = gate(delta, state.v.is_some(), config.tau);
    let next = match decision {
        Decision::Hit => {
            let v = state.v.as_ref().expect("hit requires motion");
            let z: Vec<f64> = state
                .z
                .iter()
                .zip(v)
                .map(|(z, v)| z + config.lam * v)
                .collect();
            let v = if config.update_v_on_hit {
                z.iter().zip(&state.z).map(|(a, b)| a - b).collect()
            } else {
                v.clone()
            };
            LatentState {
                z,
                v: Some(v),
                t: state.t + 1,
            }
        }
        Decision::Miss => {
            let z = oracle.apply(&state.z, embedded, state.t)?;
            // the seed latent is not a generated frame, so it gives no motion
            let v = (state.t >= 1).then(|| z.iter().zip(&state.z).map(|(a, b)| a - b).collect());
            LatentState {
                z,
                v,
                t: state.t + 1,
            }
        }
    };
    Ok(StepOutcome {
        state: next,
        decision,
        delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapRun {
    pub trajectory: Vec<Vec<f64>>,
    pub decisions: Vec<Decision>,
    pub deltas: Vec<f64>,
    pub hits: usize,
    pub skip_rate: f64,
    /// Per-frame distance to the trajectory with full inference every frame.
    pub errors: Vec<f64>,
}

impl ExtrapRun {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn run_trace<S: AsRef<str>>(
    initial: &[f64],
    actions: &[S],
    config: &ExtrapConfig,
    oracle: &DynamicsOracle,
) -> Result<ExtrapRun> {
    config.validate()?;
    if actions.is_empty() {
        return Err(Error::InvalidArgument("trace must not be empty".into()));
    }
    let mut state = LatentState::initial(initial.to_vec());
    let mut reference = initial.to_vec();
    let mut out = ExtrapRun {
        trajectory: Vec::with_capacity(actions.len()),
        decisions: Vec::with_capacity(actions.len()),
        deltas: Vec::with_capacity(actions.len()),
        hits: 0,
        skip_rate: 0.0,
        errors: Vec::with_capacity(actions.len()),
    };
    for (i, a) in actions.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| actions[j].as_ref());
        let frame = state.t;
        let outcome = step(&state, a.as_ref(), prev, config, oracle)?;
        reference = oracle.apply(&reference, config.embedding.get(a.as_ref())?, frame)?;
        out.errors.push(distance(&outcome.state.z, &reference));
        if outcome.decision == Decision::Hit {
            out.hits += 1;
        }
        out.decisions.push(outcome.decision);
        out.deltas.push(outcome.delta);
        out.trajectory.push(outcome.state.z.clone());
        state = outcome.state;
    }
    out.skip_rate = out.hits as f64 / actions.len() as f64;
    Ok(out)
}

/// Gating settings used by the pipeline simulator, where only the hit/miss
/// pattern matters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolationPolicy {
    /// Defaults to half the minimum pairwise embedding distance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Defaults to one-hot over the sorted set of observed actions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
}

impl ExtrapolationPolicy {
    /// `true` for frames served by extrapolation.
    pub fn skip_mask<S: AsRef<str>>(&self, actions: &[S]) -> Result<Vec<bool>> {
        let embedding = match &self.embedding {
            Some(e) => e.clone(),
            None => {
                let mut alphabet: Vec<&str> = actions.iter().map(AsRef::as_ref).collect();
                alphabet.sort_unstable();
                alphabet.dedup();
                Embedding::one_hot(&alphabet)
            }
        };
        let tau = self.tau.unwrap_or_else(|| embedding.auto_tau());
        let mut has_motion = false;
        let mut mask = Vec::with_capacity(actions.len());
        for (i, a) in actions.iter().enumerate() {
            let delta = match i.checked_sub(1) {
                Some(j) => action_divergence(a.as_ref(), actions[j].as_ref(), &embedding)?,
                None => {
                    embedding.get(a.as_ref())?;
                    f64::INFINITY
                }
            };
            let hit = gate(delta, has_motion, tau) == Decision::Hit;
            if !hit && i >= 1 {
                has_motion = true;
            }
            mask.push(hit);
        }
        Ok(mask)
    }
}

/// Throughput when a fraction of frames bypasses the DiT stage but is still
/// decoded: `1000 / max((1 - skip) * t_dit, t_vae / n_vae)`.
pub fn throughput_with_skip(
    t_dit_interval_ms: f64,
    t_vae_ms: f64,
    n_vae: u32,
    skip_rate: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&skip_rate) {
        return Err(Error::InvalidArgument(format!(
            "skip rate must be in [0, 1), got {skip_rate}"
        )));
    }
    if n_vae < 1 {
        return Err(Error::InvalidArgument("n_vae must be >= 1".into()));
    }
    let dit = (1.0 - skip_rate) * t_dit_interval_ms;
    let vae = t_vae_ms / f64::from(n_vae);
    Ok(1000.0 / dit.max(vae))
}
