//! File output helpers and plot-data export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::AblationReport;
use crate::simulator::{self, SimReport};

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value).as_bytes())
}

/// Ablation stages as `stage,fps,speedup`.
pub fn waterfall_csv(report: &AblationReport) -> String {
    let mut out = String::from("stage,fps,speedup\n");
    for row in &report.rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", row.stage, row.fps, row.speedup);
    }
    out
}

/// Histogram of values rounded to the microsecond, as `latency_ms,count`.
pub fn latency_hist_csv(latencies: &[f64]) -> String {
    let mut buckets: BTreeMap<i64, u64> = BTreeMap::new();
    for &l in latencies {
        *buckets.entry((l * 1e3).round() as i64).or_insert(0) += 1;
    }
    let mut out = String::from("latency_ms,count\n");
    for (micros, count) in buckets {
        let _ = writeln!(out, "{:.3},{count}", micros as f64 / 1e3);
    }
    out
}

/// Source for [`export_plotdata`].
#[derive(Debug, Clone, Copy)]
pub enum PlotSource<'a> {
    Ablation(&'a AblationReport),
    Sim(&'a SimReport),
    Latencies(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Waterfall,
    Gantt,
    LatencyHist,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "waterfall" => Ok(PlotKind::Waterfall),
            "gantt" => Ok(PlotKind::Gantt),
            "latency_hist" | "latency-hist" => Ok(PlotKind::LatencyHist),
            _ => Err(Error::InvalidArgument(format!("unknown plot kind {s:?}"))),
        }
    }
}

pub fn plotdata_csv(source: PlotSource<'_>, kind: PlotKind) -> Result<String> {
    match (kind, source) {
        (PlotKind::Waterfall, PlotSource::Ablation(r)) => Ok(waterfall_csv(r)),
        (PlotKind::Gantt, PlotSource::Sim(r)) => Ok(simulator::gantt_csv(r)),
        (PlotKind::LatencyHist, PlotSource::Latencies(l)) => Ok(latency_hist_csv(l)),
        (PlotKind::LatencyHist, PlotSource::Sim(r)) => {
            let lat: Vec<f64> = r
                .records
                .iter()
                .map(|rec| rec.effective_latency_ms.unwrap_or_else(|| rec.latency_ms()))
                .collect();
            Ok(latency_hist_csv(&lat))
        }
        (kind, _) => Err(Error::InvalidArgument(format!(
            "{kind:?} export does not match the supplied report type"
        ))),
    }
}

pub fn export_plotdata(source: PlotSource<'_>, kind: PlotKind, path: &Path) -> Result<()> {
    write_atomic(path, plotdata_csv(source, kind)?.as_bytes())
}
