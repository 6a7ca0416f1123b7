//! Closed-form stage latency and throughput models.
//!
//! The world-model (DiT) stage is compute bound and scales with the number of
//! sequence-parallel devices, paying a ring all-to-all per step. The decoder
//! (VAE) stage is memory bound and scales with aggregate HBM bandwidth.
//! Throughput of the two-stage pipeline is set by the slower stage.
//!
//! All durations are milliseconds in `f64`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stage time difference below which a configuration is reported as balanced.
pub const BALANCED_TOLERANCE_MS: f64 = 1.0;

/// Per-device hardware characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// Peak FP16-equivalent compute, FLOP/s.
    pub pi_peak: f64,
    /// HBM bandwidth per device, bytes/s.
    pub bw_hbm: f64,
    /// Interconnect link bandwidth, bytes/s.
    pub b_link: f64,
    /// On-chip buffer capacity, bytes.
    pub s_sram: f64,
    /// Achieved fraction of peak compute, in (0, 1].
    pub eta_util: f64,
    /// Achieved fraction of HBM bandwidth, in (0, 1].
    pub eta_eff: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hardware.pi_peak", self.pi_peak),
            ("hardware.bw_hbm", self.bw_hbm),
            ("hardware.b_link", self.b_link),
            ("hardware.s_sram", self.s_sram),
            ("hardware.eta_util", self.eta_util),
            ("hardware.eta_eff", self.eta_eff),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Schema {
                    field: field.into(),
                    message: format!("must be finite and > 0, got {value}"),
                });
            }
        }
        for (field, value) in [
            ("hardware.eta_util", self.eta_util),
            ("hardware.eta_eff", self.eta_eff),
        ] {
            if value > 1.0 {
                return Err(Error::Schema {
                    field: field.into(),
                    message: format!("must be <= 1, got {value}"),
                });
            }
        }
        Ok(())
    }
}

/// Per-frame workload description plus optional profiled constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    /// FLOPs per frame per denoise pass.
    pub w_dit: f64,
    /// Bytes exchanged by the attention all-to-all per frame.
    pub d_attn: f64,
    /// Decoder read + write bytes per frame.
    pub m_vae: f64,
    /// Attention head count.
    pub h_heads: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_ms: Option<f64>,
    /// Measured DiT step time keyed by device count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiled_dit: Option<BTreeMap<u32, f64>>,
    /// Measured single-device decode time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_vae_single_ms: Option<f64>,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("workload.w_dit", self.w_dit),
            ("workload.d_attn", self.d_attn),
            ("workload.m_vae", self.m_vae),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::Schema {
                    field: field.into(),
                    message: format!("must be finite and >= 0, got {value}"),
                });
            }
        }
        if self.h_heads < 1 {
            return Err(Error::Schema {
                field: "workload.h_heads".into(),
                message: "must be >= 1".into(),
            });
        }
        for (field, value) in [
            ("workload.alpha_ms", self.alpha_ms),
            ("workload.beta_ms", self.beta_ms),
            ("workload.t_vae_single_ms", self.t_vae_single_ms),
        ] {
            if let Some(v) = value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Schema {
                        field: field.into(),
                        message: format!("must be finite and >= 0, got {v}"),
                    });
                }
            }
        }
        if let Some(table) = &self.profiled_dit {
            for (n, ms) in table {
                if *n == 0 || !(ms.is_finite() && *ms > 0.0) {
                    return Err(Error::Schema {
                        field: format!("workload.profiled_dit.{n}"),
                        message: format!("device count must be >= 1 and time > 0, got {ms}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Hardware and workload read together from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub hardware: HardwareProfile,
    pub workload: WorkloadProfile,
}

impl Profile {
    pub fn validate(&self) -> Result<()> {
        self.hardware.validate()?;
        self.workload.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DitMode {
    Analytic,
    #[default]
    Profiled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeMode {
    Analytic,
    #[default]
    ProfiledInterval,
}

/// How decode work is spread over the decoder devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeParallelism {
    /// Whole frames dispatched to worker `frame mod n_v`; per-frame latency
    /// stays the single-device time.
    #[default]
    RoundRobin,
    /// Every frame split across all workers; latency divides too.
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalModes {
    pub dit: DitMode,
    pub vae: VaeMode,
    #[serde(default)]
    pub vae_parallelism: VaeParallelism,
}

impl EvalModes {
    pub fn profiled() -> Self {
        Self::default()
    }

    pub fn analytic() -> Self {
        Self {
            dit: DitMode::Analytic,
            vae: VaeMode::Analytic,
            vae_parallelism: VaeParallelism::RoundRobin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bottleneck {
    #[serde(rename = "DiT-Compute")]
    DitCompute,
    #[serde(rename = "DiT-Comm")]
    DitComm,
    #[serde(rename = "VAE-Memory")]
    VaeMemory,
    Balanced,
}

impl Bottleneck {
    pub fn as_str(self) -> &'static str {
        match self {
            Bottleneck::DitCompute => "DiT-Compute",
            Bottleneck::DitComm => "DiT-Comm",
            Bottleneck::VaeMemory => "VAE-Memory",
            Bottleneck::Balanced => "Balanced",
        }
    }

    pub fn is_dit(self) -> bool {
        matches!(self, Bottleneck::DitCompute | Bottleneck::DitComm)
    }
}

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_devices(n: u32, name: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
    }
    Ok(())
}

/// Ideal-scaling compute time of one DiT step.
pub fn t_comp(hw: &HardwareProfile, wl: &WorkloadProfile, n_d: u32) -> Result<f64> {
    check_devices(n_d, "n_d")?;
    Ok(wl.w_dit / (f64::from(n_d) * hw.pi_peak * hw.eta_util) * 1e3)
}

/// Ring all-to-all time: `2(n-1)/n * D / B`.
pub fn t_comm(hw: &HardwareProfile, wl: &WorkloadProfile, n_d: u32) -> Result<f64> {
    check_devices(n_d, "n_d")?;
    let n = f64::from(n_d);
    Ok(2.0 * (n - 1.0) / n * wl.d_attn / hw.b_link * 1e3)
}

fn analytic_constants(wl: &WorkloadProfile) -> Result<(f64, f64)> {
    match (wl.alpha_ms, wl.beta_ms) {
        (Some(a), Some(b)) => Ok((a, b)),
        (a, b) => {
            let mut missing = Vec::new();
            if a.is_none() {
                missing.push("workload.alpha_ms");
            }
            if b.is_none() {
                missing.push("workload.beta_ms");
            }
            Err(Error::Configuration(format!(
                "analytic DiT mode requires {}",
                missing.join(", ")
            )))
        }
    }
}

/// `alpha/n + beta*(n-1)/n`.
pub fn dit_step_analytic(alpha_ms: f64, beta_ms: f64, n_d: u32) -> f64 {
    let n = f64::from(n_d);
    alpha_ms / n + beta_ms * (n - 1.0) / n
}

/// DiT step time for `n_d` sequence-parallel devices.
pub fn t_dit(wl: &WorkloadProfile, n_d: u32, mode: DitMode) -> Result<f64> {
    check_devices(n_d, "n_d")?;
    match mode {
        DitMode::Analytic => {
            let (alpha, beta) = analytic_constants(wl)?;
            Ok(dit_step_analytic(alpha, beta, n_d))
        }
        DitMode::Profiled => wl
            .profiled_dit
            .as_ref()
            .and_then(|table| table.get(&n_d).copied())
            .ok_or_else(|| Error::Configuration(format!("no profiled DiT time for n_d = {n_d}"))),
    }
}

/// Decode timing for a given worker count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeTiming {
    /// Time between consecutive decoded frames.
    pub interval_ms: f64,
    /// Time from decode start to decode end for one frame.
    pub latency_ms: f64,
}

fn vae_single_ms(wl: &WorkloadProfile, hw: &HardwareProfile, mode: VaeMode) -> Result<f64> {
    match mode {
        VaeMode::Analytic => Ok(wl.m_vae / (hw.bw_hbm * hw.eta_eff) * 1e3),
        VaeMode::ProfiledInterval => wl.t_vae_single_ms.ok_or_else(|| {
            Error::Configuration("profiled decode mode requires workload.t_vae_single_ms".into())
        }),
    }
}

pub fn vae_timing(
    wl: &WorkloadProfile,
    hw: &HardwareProfile,
    n_v: u32,
    mode: VaeMode,
    parallelism: VaeParallelism,
) -> Result<VaeTiming> {
    check_devices(n_v, "n_v")?;
    let single = vae_single_ms(wl, hw, mode)?;
    let interval = single / f64::from(n_v);
    let latency = match parallelism {
        VaeParallelism::RoundRobin => single,
        VaeParallelism::Spatial => interval,
    };
    Ok(VaeTiming {
        interval_ms: interval,
        latency_ms: latency,
    })
}

/// Decoder stage time seen by the pipeline (the per-frame output interval).
pub fn t_vae(wl: &WorkloadProfile, hw: &HardwareProfile, n_v: u32, mode: VaeMode) -> Result<f64> {
    Ok(vae_timing(wl, hw, n_v, mode, VaeParallelism::RoundRobin)?.interval_ms)
}

/// Throughput estimate for one device split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsEstimate {
    pub fps: f64,
    pub t_dit_ms: f64,
    pub vae: VaeTiming,
    pub bottleneck: Bottleneck,
}

/// Whether the DiT step at `n_d` is dominated by its compute or its
/// communication term. Uses fitted constants when present, otherwise the
/// hardware model; with neither, compute.
fn dit_limiter(hw: &HardwareProfile, wl: &WorkloadProfile, n_d: u32) -> Bottleneck {
    let n = f64::from(n_d);
    let (compute, comm) = match (wl.alpha_ms, wl.beta_ms) {
        (Some(a), Some(b)) => (a / n, b * (n - 1.0) / n),
        _ => match (t_comp(hw, wl, n_d), t_comm(hw, wl, n_d)) {
            (Ok(c), Ok(m)) => (c, m),
            _ => (1.0, 0.0),
        },
    };
    if comm > compute {
        Bottleneck::DitComm
    } else {
        Bottleneck::DitCompute
    }
}

/// Bottleneck tag for a pair of stage times.
pub fn classify(
    hw: &HardwareProfile,
    wl: &WorkloadProfile,
    n_d: u32,
    t_dit_ms: f64,
    t_vae_ms: f64,
) -> Bottleneck {
    if (t_dit_ms - t_vae_ms).abs() < BALANCED_TOLERANCE_MS {
        Bottleneck::Balanced
    } else if t_dit_ms > t_vae_ms {
        dit_limiter(hw, wl, n_d)
    } else {
        Bottleneck::VaeMemory
    }
}

/// Pipeline throughput: `1000 / max(t_dit, t_vae)`.
pub fn fps(
    hw: &HardwareProfile,
    wl: &WorkloadProfile,
    n_d: u32,
    n_v: u32,
    modes: EvalModes,
) -> Result<FpsEstimate> {
    check_devices(n_d, "n_d")?;
    check_devices(n_v, "n_v")?;
    let t_dit_ms = t_dit(wl, n_d, modes.dit)?;
    let vae = vae_timing(wl, hw, n_v, modes.vae, modes.vae_parallelism)?;
    let fps = (1000.0 / t_dit_ms).min(1000.0 / vae.interval_ms);
    Ok(FpsEstimate {
        fps,
        t_dit_ms,
        vae,
        bottleneck: classify(hw, wl, n_d, t_dit_ms, vae.interval_ms),
    })
}

/// Rounds to the 0.1 FPS resolution used in reports.
pub fn round_tenth(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResidual {
    pub n_d: u32,
    pub measured_ms: f64,
    pub predicted_ms: f64,
    /// `measured - predicted`.
    pub residual_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaBetaFit {
    pub alpha_ms: f64,
    pub beta_ms: f64,
    pub residuals: Vec<FitResidual>,
}

impl AlphaBetaFit {
    pub fn max_abs_residual(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.residual_ms.abs())
            .fold(0.0, f64::max)
    }
}

/// Least-squares fit of `t(n) = alpha/n + beta*(n-1)/n` to measured step times.
///
/// Solves the 2x2 normal equations directly. Two samples at distinct device
/// counts determine the constants exactly.
pub fn fit_alpha_beta(samples: &[(u32, f64)]) -> Result<AlphaBetaFit> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some((n, _)) = samples.iter().find(|(n, _)| *n == 0) {
        return Err(Error::Fit(format!("device count must be >= 1, got {n}")));
    }
    let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(n, t) in samples {
        let n = f64::from(n);
        let x1 = 1.0 / n;
        let x2 = (n - 1.0) / n;
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        r1 += x1 * t;
        r2 += x2 * t;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() <= 1e-12 * (s11 * s22).max(f64::MIN_POSITIVE) {
        return Err(Error::Fit(
            "rank-deficient system: samples need at least two distinct device counts".into(),
        ));
    }
    let alpha = (r1 * s22 - r2 * s12) / det;
    let beta = (s11 * r2 - s12 * r1) / det;
    let residuals = samples
        .iter()
        .map(|&(n_d, measured_ms)| {
            let predicted_ms = dit_step_analytic(alpha, beta, n_d);
            FitResidual {
                n_d,
                measured_ms,
                predicted_ms,
                residual_ms: measured_ms - predicted_ms,
            }
        })
        .collect();
    Ok(AlphaBetaFit {
        alpha_ms: alpha,
        beta_ms: beta,
        residuals,
    })
}
