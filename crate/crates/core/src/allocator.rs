//! Device partitioning between the DiT and VAE stages.
//!
//! Sequence parallelism shards attention heads, so the DiT device count must
//! divide the head count. The candidate space is at most `n_total - 1`
//! splits, so every feasible split is evaluated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perfmodel::{self, Bottleneck, EvalModes, HardwareProfile, WorkloadProfile};

pub const DEFAULT_MIN_DIT: u32 = 2;

/// Device counts `n_d` with `h_heads % n_d == 0` and `min_dit <= n_d < n_total`,
/// ascending.
pub fn feasible_splits(h_heads: u32, n_total: u32, min_dit: u32) -> Result<Vec<u32>> {
    if n_total < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_total must be >= 2, got {n_total}"
        )));
    }
    if min_dit < 1 {
        return Err(Error::InvalidArgument("min_dit must be >= 1".into()));
    }
    if h_heads < 1 {
        return Err(Error::InvalidArgument("h_heads must be >= 1".into()));
    }
    let splits: Vec<u32> = (min_dit..n_total)
        .filter(|n| h_heads.is_multiple_of(*n))
        .collect();
    if splits.is_empty() {
        return Err(Error::NoFeasibleSplit {
            h_heads,
            min_dit,
            max_dit: n_total - 1,
        });
    }
    Ok(splits)
}

/// One evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_dit: u32,
    pub n_vae: u32,
    /// Heads per DiT device.
    pub heads_per_device: u32,
    pub t_dit_ms: f64,
    pub vae_interval_ms: f64,
    pub fps: f64,
    /// Strict tag: slower stage, or balanced within 1 ms.
    pub bottleneck: Bottleneck,
    /// Reporting label: the best split sitting at the point where the limiting
    /// stage flips between neighbouring splits is labelled balanced.
    pub stage_label: Bottleneck,
}

impl SweepRow {
    pub fn config(&self) -> String {
        format!("{} DiT + {} VAE", self.n_dit, self.n_vae)
    }

    pub fn split(&self) -> String {
        format!("H/{}", self.heads_per_device)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub n_dit: u32,
    pub n_vae: u32,
    pub predicted_fps: f64,
    pub bottleneck: Bottleneck,
    pub stage_label: Bottleneck,
    pub feasible_set: Vec<u32>,
}

/// Evaluates every feasible split, ascending in `n_dit`.
pub fn sweep(
    hw: &HardwareProfile,
    wl: &WorkloadProfile,
    n_total: u32,
    min_dit: u32,
    modes: EvalModes,
) -> Result<Vec<SweepRow>> {
    let splits = feasible_splits(wl.h_heads, n_total, min_dit)?;
    let mut rows = splits
        .iter()
        .map(|&n_dit| {
            let n_vae = n_total - n_dit;
            let est = perfmodel::fps(hw, wl, n_dit, n_vae, modes)?;
            Ok(SweepRow {
                n_dit,
                n_vae,
                heads_per_device: wl.h_heads / n_dit,
                t_dit_ms: est.t_dit_ms,
                vae_interval_ms: est.vae.interval_ms,
                fps: est.fps,
                bottleneck: est.bottleneck,
                stage_label: est.bottleneck,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    label_crossover(&mut rows);
    Ok(rows)
}

fn label_crossover(rows: &mut [SweepRow]) {
    let Some(best) = best_index(rows) else {
        return;
    };
    let is_dit = |r: &SweepRow| r.bottleneck.is_dit();
    let flips = |i: usize, j: usize| {
        rows[i].bottleneck != Bottleneck::Balanced
            && rows[j].bottleneck != Bottleneck::Balanced
            && is_dit(&rows[i]) != is_dit(&rows[j])
    };
    let at_crossover =
        (best > 0 && flips(best, best - 1)) || (best + 1 < rows.len() && flips(best, best + 1));
    if at_crossover {
        rows[best].stage_label = Bottleneck::Balanced;
    }
}

/// Highest fps; ties go to the larger decode allocation.
fn best_index(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &rows[b];
                if row.fps > cur.fps || (row.fps == cur.fps && row.n_vae > cur.n_vae) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Feasible split with maximum predicted throughput.
pub fn optimize(
    hw: &HardwareProfile,
    wl: &WorkloadProfile,
    n_total: u32,
    min_dit: u32,
    modes: EvalModes,
) -> Result<AllocationPlan> {
    let rows = sweep(hw, wl, n_total, min_dit, modes)?;
    let best = best_index(&rows).expect("sweep returns at least one row");
    let row = &rows[best];
    Ok(AllocationPlan {
        n_dit: row.n_dit,
        n_vae: row.n_vae,
        predicted_fps: row.fps,
        bottleneck: row.bottleneck,
        stage_label: row.stage_label,
        feasible_set: rows.iter().map(|r| r.n_dit).collect(),
    })
}
