//! Scenario documents and the stage-by-stage ablation ladder.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, DeserializeOwned, DeserializeSeed, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::allocator::{self, DEFAULT_MIN_DIT};
use crate::error::{Error, Result};
use crate::extrapolation::{throughput_with_skip, ExtrapolationPolicy};
use crate::perfmodel::{self, EvalModes, HardwareProfile, Profile, WorkloadProfile};
use crate::speculation::{self, amortized_latency, SpecConfig, DEFAULT_OVERHEAD_MS};
use crate::trace::ActionTrace;

fn default_n_total() -> u32 {
    8
}

fn default_overhead() -> f64 {
    DEFAULT_OVERHEAD_MS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub n_dit: u32,
    pub n_vae: u32,
}

impl Split {
    pub fn architecture(&self) -> String {
        format!("{} DiT + {} VAE", self.n_dit, self.n_vae)
    }
}

/// `"auto"` runs the allocator; an explicit split overrides it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    #[default]
    Auto,
    Fixed(Split),
}

/// Measured stage times that the analytic models do not derive.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionCalibration {
    /// End-to-end single-device latency before any optimization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_latency_ms: Option<f64>,
    /// Unfused single-device decode time; used for the baseline when no
    /// `baseline_latency_ms` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_vae_baseline_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_vae_fused_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_dit_single_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolationStage {
    /// Fraction of frames served without a DiT pass. Measured on the
    /// scenario trace with `policy` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<ExtrapolationPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeculationStage {
    /// Measured on the scenario trace with `config.predictor` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
    /// Frame time paid on a miss; defaults to the previous stage's interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_sys_ms: Option<f64>,
    #[serde(default = "default_overhead")]
    pub t_overhead_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SpecConfig>,
}

/// Stage toggles; each enabled stage builds on the ones before it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policies {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_calibration: Option<FusionCalibration>,
    #[serde(default)]
    pub fusion: bool,
    /// Hand-picked split evaluated before the optimized one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heuristic_split: Option<Split>,
    #[serde(default)]
    pub optimized_ratio: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrapolation: Option<ExtrapolationStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speculation: Option<SpeculationStage>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waterfall: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub hardware: HardwareProfile,
    pub workload: WorkloadProfile,
    #[serde(default = "default_n_total")]
    pub n_total: u32,
    #[serde(default)]
    pub allocation: Allocation,
    #[serde(default)]
    pub policies: Policies,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub outputs: OutputPaths,
}

impl ScenarioConfig {
    pub fn profile(&self) -> Profile {
        Profile {
            hardware: self.hardware.clone(),
            workload: self.workload.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hardware.validate()?;
        self.workload.validate()?;
        let schema = |field: &str, message: String| Error::Schema {
            field: field.into(),
            message,
        };
        if self.n_total < 2 {
            return Err(schema(
                "n_total",
                format!("must be >= 2, got {}", self.n_total),
            ));
        }
        if let Allocation::Fixed(s) = self.allocation {
            if s.n_dit < 1 || s.n_vae < 1 || s.n_dit + s.n_vae > self.n_total {
                return Err(schema(
                    "allocation",
                    format!(
                        "{}:{} does not fit {} devices",
                        s.n_dit, s.n_vae, self.n_total
                    ),
                ));
            }
        }
        let p = &self.policies;
        if let Some(s) = p.heuristic_split {
            if s.n_dit < 1 || s.n_vae < 1 || s.n_dit + s.n_vae > self.n_total {
                return Err(schema(
                    "policies.heuristic_split",
                    format!(
                        "{}:{} does not fit {} devices",
                        s.n_dit, s.n_vae, self.n_total
                    ),
                ));
            }
        }
        if let Some(cal) = &p.fusion_calibration {
            for (field, v) in [
                (
                    "policies.fusion_calibration.baseline_latency_ms",
                    cal.baseline_latency_ms,
                ),
                (
                    "policies.fusion_calibration.t_vae_baseline_ms",
                    cal.t_vae_baseline_ms,
                ),
                (
                    "policies.fusion_calibration.t_vae_fused_ms",
                    cal.t_vae_fused_ms,
                ),
                (
                    "policies.fusion_calibration.t_dit_single_ms",
                    cal.t_dit_single_ms,
                ),
            ] {
                if let Some(v) = v {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(schema(field, format!("must be > 0, got {v}")));
                    }
                }
            }
        }
        if let Some(ex) = &p.extrapolation {
            if p.heuristic_split.is_none() && !p.optimized_ratio {
                return Err(schema(
                    "policies.extrapolation",
                    "needs a pipeline split stage (heuristic_split or optimized_ratio)".into(),
                ));
            }
            if let Some(s) = ex.skip_rate {
                if !(0.0..1.0).contains(&s) {
                    return Err(schema(
                        "policies.extrapolation.skip_rate",
                        format!("must be in [0, 1), got {s}"),
                    ));
                }
            }
        }
        if let Some(sp) = &p.speculation {
            if let Some(h) = sp.hit_rate {
                if !(0.0..=1.0).contains(&h) {
                    return Err(schema(
                        "policies.speculation.hit_rate",
                        format!("must be in [0, 1], got {h}"),
                    ));
                }
            }
            if !(sp.t_overhead_ms.is_finite() && sp.t_overhead_ms >= 0.0) {
                return Err(schema(
                    "policies.speculation.t_overhead_ms",
                    "must be >= 0".into(),
                ));
            }
            if let Some(t) = sp.t_sys_ms {
                if !(t.is_finite() && t >= 0.0) {
                    return Err(schema(
                        "policies.speculation.t_sys_ms",
                        "must be >= 0".into(),
                    ));
                }
            }
            if let Some(c) = &sp.config {
                c.validate()?;
            }
        }
        if let Some(t) = &self.trace {
            if !t.exists() {
                return Err(schema("trace", format!("{} does not exist", t.display())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        crate::io::to_json(self)
    }
}

/// Rejects any JSON object that repeats a key, at any depth.
struct NoDuplicates;

impl<'de> DeserializeSeed<'de> for NoDuplicates {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> std::result::Result<(), D::Error> {
        d.deserialize_any(self)
    }
}

impl<'de> Visitor<'de> for NoDuplicates {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("any JSON value")
    }

    fn visit_bool<E>(self, _: bool) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_i64<E>(self, _: i64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_u64<E>(self, _: u64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_f64<E>(self, _: f64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_str<E>(self, _: &str) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_unit<E>(self) -> std::result::Result<(), E> {
        Ok(())
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<(), A::Error> {
        while seq.next_element_seed(NoDuplicates)?.is_some() {}
        Ok(())
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<(), A::Error> {
        let mut keys = HashSet::new();
        while let Some(key) = map.next_key::<String>()? {
            if !keys.insert(key.clone()) {
                return Err(de::Error::custom(format!("duplicate key `{key}`")));
            }
            map.next_value_seed(NoDuplicates)?;
        }
        Ok(())
    }
}

/// Strict single-document JSON: duplicate keys are parse errors, schema
/// violations name the offending field path.
pub fn parse_document<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let parse_err = |message: String| Error::Parse {
        path: origin.to_path_buf(),
        message,
    };
    let mut de = serde_json::Deserializer::from_str(text);
    NoDuplicates
        .deserialize(&mut de)
        .map_err(|e| parse_err(e.to_string()))?;

    let mut de = serde_json::Deserializer::from_str(text);
    match serde_path_to_error::deserialize(&mut de) {
        Ok(v) => {
            de.end().map_err(|e| parse_err(e.to_string()))?;
            Ok(v)
        }
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_syntax() || inner.is_eof() {
                return Err(parse_err(inner.to_string()));
            }
            let msg = inner.to_string();
            let field = match msg
                .strip_prefix("missing field `")
                .and_then(|r| r.split('`').next())
            {
                Some(name) if path == "." => name.to_owned(),
                Some(name) => format!("{path}.{name}"),
                None => path,
            };
            Err(Error::Schema {
                field,
                message: msg,
            })
        }
    }
}

/// Reads and strictly parses a JSON document.
pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text, path)
}

/// Parses a scenario document. `origin` names the source in errors and
/// anchors a relative trace path.
pub fn parse_scenario(text: &str, origin: &Path) -> Result<ScenarioConfig> {
    let mut cfg: ScenarioConfig = parse_document(text, origin)?;
    if let Some(t) = &cfg.trace {
        if t.is_relative() {
            if let Some(dir) = origin.parent() {
                cfg.trace = Some(dir.join(t));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// End-to-end latency of one frame.
    Latency,
    /// Time between output frames.
    Interval,
    /// Expected perceived latency with speculation.
    AmortizedLatency,
}

impl MetricKind {
    pub fn suffix(self) -> &'static str {
        match self {
            MetricKind::Latency => "Lat",
            MetricKind::Interval => "Int",
            MetricKind::AmortizedLatency => "Lat*",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub stage: String,
    pub architecture: String,
    pub metric_value: f64,
    pub metric_kind: MetricKind,
    pub fps: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `stage,architecture,metric_ms,metric_kind,fps,speedup`.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("stage,architecture,metric_ms,metric_kind,fps,speedup\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{:.6},{:.6}",
                r.stage,
                r.architecture,
                r.metric_value,
                r.metric_kind.suffix(),
                r.fps,
                r.speedup
            );
        }
        out
    }
}

fn load_trace(
    cfg: &ScenarioConfig,
    needed_by: &str,
    missing: &mut Vec<String>,
) -> Option<ActionTrace> {
    match &cfg.trace {
        Some(p) => match ActionTrace::read(p) {
            Ok(t) => Some(t),
            Err(e) => {
                missing.push(format!("{needed_by} (trace unreadable: {e})"));
                None
            }
        },
        None => {
            missing.push(needed_by.to_owned());
            None
        }
    }
}

/// Evaluates every enabled stage with the corresponding model and reports
/// fps and cumulative speedup against the sequential baseline.
pub fn run_ablation(cfg: &ScenarioConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let p = &cfg.policies;
    let cal = p.fusion_calibration.unwrap_or_default();
    let mut missing: Vec<String> = Vec::new();
    let field = |name: &str| format!("policies.fusion_calibration.{name}");

    let baseline_latency = match (
        cal.baseline_latency_ms,
        cal.t_dit_single_ms,
        cal.t_vae_baseline_ms,
    ) {
        (Some(l), _, _) => Some(l),
        (None, Some(d), Some(v)) => Some(d + v),
        _ => {
            missing.push(format!(
                "{} (or t_dit_single_ms + t_vae_baseline_ms)",
                field("baseline_latency_ms")
            ));
            None
        }
    };
    if p.fusion {
        if cal.t_dit_single_ms.is_none() {
            missing.push(field("t_dit_single_ms"));
        }
        if cal.t_vae_fused_ms.is_none() {
            missing.push(field("t_vae_fused_ms"));
        }
    }
    // Decode time seen by the pipelined stages.
    let t_vae_single = if p.fusion {
        cal.t_vae_fused_ms
    } else {
        cal.t_vae_baseline_ms.or(cfg.workload.t_vae_single_ms)
    };
    let pipelined = p.heuristic_split.is_some() || p.optimized_ratio;
    if pipelined {
        if t_vae_single.is_none() {
            missing.push(if p.fusion {
                field("t_vae_fused_ms")
            } else {
                "workload.t_vae_single_ms".to_owned()
            });
        }
        if cfg.workload.profiled_dit.is_none() {
            missing.push("workload.profiled_dit".to_owned());
        }
    }
    let skip_rate = p.extrapolation.as_ref().and_then(|ex| match ex.skip_rate {
        Some(s) => Some(Ok(s)),
        None => load_trace(cfg, "policies.extrapolation.skip_rate", &mut missing).map(|trace| {
            let mask = ex
                .policy
                .clone()
                .unwrap_or_default()
                .skip_mask(&trace.actions())?;
            Ok(mask.iter().filter(|&&s| s).count() as f64 / mask.len().max(1) as f64)
        }),
    });
    let hit_rate = p
        .speculation
        .as_ref()
        .and_then(|sp| match (sp.hit_rate, &sp.config) {
            (Some(h), _) => Some(Ok(h)),
            (None, Some(c)) => load_trace(cfg, "policies.speculation.hit_rate", &mut missing)
                .map(|trace| speculation::hit_rate(&c.predictor, &trace, c.seed)),
            (None, None) => {
                missing.push(
                    "policies.speculation.hit_rate (or policies.speculation.config)".to_owned(),
                );
                None
            }
        });
    if !missing.is_empty() {
        missing.dedup();
        return Err(Error::Configuration(format!(
            "missing calibration constants: {}",
            missing.join(", ")
        )));
    }
    let skip_rate = skip_rate.transpose()?;
    let hit_rate = hit_rate.transpose()?;
    let baseline_latency = baseline_latency.expect("checked above");

    let mut rows = Vec::new();
    let push = |rows: &mut Vec<AblationRow>,
                stage: String,
                architecture: String,
                metric_value: f64,
                metric_kind: MetricKind,
                fps: f64| {
        rows.push(AblationRow {
            stage,
            architecture,
            metric_value,
            metric_kind,
            fps,
            speedup: 0.0,
        });
    };
    push(
        &mut rows,
        "Baseline (Sequential)".into(),
        "Single Card".into(),
        baseline_latency,
        MetricKind::Latency,
        1000.0 / baseline_latency,
    );
    if p.fusion {
        let latency = cal.t_dit_single_ms.expect("checked") + cal.t_vae_fused_ms.expect("checked");
        push(
            &mut rows,
            "+ Operator Fusion".into(),
            "Single Card".into(),
            latency,
            MetricKind::Latency,
            1000.0 / latency,
        );
    }

    let mut wl = cfg.workload.clone();
    wl.t_vae_single_ms = t_vae_single;
    let modes = EvalModes::profiled();
    let mut last_split: Option<(Split, f64)> = None;
    if let Some(s) = p.heuristic_split {
        let est = perfmodel::fps(&cfg.hardware, &wl, s.n_dit, s.n_vae, modes)?;
        push(
            &mut rows,
            format!("+ Ulysses ({}:{})", s.n_dit, s.n_vae),
            s.architecture(),
            1000.0 / est.fps,
            MetricKind::Interval,
            est.fps,
        );
        last_split = Some((s, est.t_dit_ms));
    }
    if p.optimized_ratio {
        let s = match cfg.allocation {
            Allocation::Fixed(s) => s,
            Allocation::Auto => {
                let plan =
                    allocator::optimize(&cfg.hardware, &wl, cfg.n_total, DEFAULT_MIN_DIT, modes)?;
                Split {
                    n_dit: plan.n_dit,
                    n_vae: plan.n_vae,
                }
            }
        };
        let est = perfmodel::fps(&cfg.hardware, &wl, s.n_dit, s.n_vae, modes)?;
        push(
            &mut rows,
            format!("+ Optimized Ratio ({}:{})", s.n_dit, s.n_vae),
            s.architecture(),
            1000.0 / est.fps,
            MetricKind::Interval,
            est.fps,
        );
        last_split = Some((s, est.t_dit_ms));
    }
    if let Some(skip) = skip_rate {
        let (s, t_dit) = last_split.expect("validated: extrapolation follows a split stage");
        let fps = throughput_with_skip(t_dit, t_vae_single.expect("checked"), s.n_vae, skip)?;
        push(
            &mut rows,
            "+ Extrapolation".into(),
            s.architecture(),
            1000.0 / fps,
            MetricKind::Interval,
            fps,
        );
    }
    if let (Some(sp), Some(hit)) = (&p.speculation, hit_rate) {
        let prev = rows.last().expect("baseline row").clone();
        let t_sys = sp.t_sys_ms.unwrap_or(1000.0 / prev.fps);
        let latency = amortized_latency(hit, t_sys, sp.t_overhead_ms)?;
        push(
            &mut rows,
            format!("+ Speculative ({:.0}% hit)", hit * 100.0),
            prev.architecture,
            latency,
            MetricKind::AmortizedLatency,
            prev.fps,
        );
    }
    let base_fps = rows[0].fps;
    for r in &mut rows {
        r.speedup = r.fps / base_fps;
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::round_tenth;

    const REFERENCE: &str = include_str!("../../../configs/ablation_720x480.json");

    fn reference() -> ScenarioConfig {
        parse_scenario(REFERENCE, Path::new("configs/ablation_720x480.json")).unwrap()
    }

    #[test]
    fn reference_waterfall() {
        let report = run_ablation(&reference()).unwrap();
        let fps: Vec<f64> = report.rows.iter().map(|r| round_tenth(r.fps)).collect();
        assert_eq!(&fps[..4], &[2.1, 4.5, 16.6, 19.4]);
        assert!((report.rows[4].fps - 26.4).abs() / 26.4 <= 0.05);
        assert_eq!(report.rows[5].fps, report.rows[4].fps);
        assert!((report.rows[5].metric_value - 2.76).abs() < 1e-9);
        assert!(report.rows[5].speedup >= 12.0);
        for r in &report.rows {
            assert_eq!(r.speedup, r.fps / report.rows[0].fps);
        }
        assert_eq!(report.rows[3].architecture, "5 DiT + 3 VAE");
    }

    #[test]
    fn all_disabled_is_baseline_only() {
        let mut cfg = reference();
        cfg.policies = Policies {
            fusion_calibration: cfg.policies.fusion_calibration,
            ..Policies::default()
        };
        let report = run_ablation(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].speedup, 1.0);
    }

    #[test]
    fn missing_calibration_is_listed() {
        let mut cfg = reference();
        cfg.policies.fusion_calibration = None;
        let err = run_ablation(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Configuration(_)));
        for name in ["baseline_latency_ms", "t_dit_single_ms", "t_vae_fused_ms"] {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let mut v: serde_json::Value = serde_json::from_str(REFERENCE).unwrap();
        v["hardware"].as_object_mut().unwrap().remove("bw_hbm");
        let err = parse_scenario(&v.to_string(), Path::new("s.json")).unwrap_err();
        match err {
            Error::Schema { field, .. } => assert_eq!(field, "hardware.bw_hbm"),
            other => panic!("{other}"),
        }
        let mut v: serde_json::Value = serde_json::from_str(REFERENCE).unwrap();
        v["policies"]["bogus"] = serde_json::json!(1);
        assert!(matches!(
            parse_scenario(&v.to_string(), Path::new("s.json")),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn duplicate_keys_are_parse_errors() {
        let text = REFERENCE.replacen("\"n_total\": 8,", "\"n_total\": 8, \"n_total\": 8,", 1);
        assert_ne!(text, REFERENCE);
        let err = parse_scenario(&text, Path::new("s.json")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(err.to_string().contains("duplicate"), "{err}");
        let err = parse_scenario("{\"hardware\": ", Path::new("s.json")).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn roundtrip() {
        let cfg = reference();
        let back = parse_scenario(&cfg.to_json(), Path::new("configs/x.json")).unwrap();
        assert_eq!(back, cfg);
    }
}
