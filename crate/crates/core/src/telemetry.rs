//! Per-iteration training telemetry and its JSON-lines encoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Snapshot of one training iteration. Loss and similarities are measured at
/// the point the descent step is taken from (after annealing, if any).
/// Similarities are `null` when the run has a single source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryRecord {
    pub t: usize,
    pub loss: f64,
    pub domain_losses: Vec<f64>,
    pub min_sim: Option<f64>,
    pub mean_sim: Option<f64>,
    pub accepted: usize,
    pub theta_norm: f64,
    /// Wall time of the iteration; 0 unless wall-time recording is enabled.
    pub ms: f64,
}

pub fn write_jsonl<W: Write>(records: &[TelemetryRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| LabError::Parse(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses JSON lines; blank lines are skipped. Errors name the 1-based line.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TelemetryRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| LabError::Domain(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Headline numbers of a telemetry stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TelemetrySummary {
    pub iterations: usize,
    /// First and last iteration with accepted candidates.
    pub window: Option<(usize, usize)>,
    pub sim_at_start: Option<f64>,
    pub sim_at_end: Option<f64>,
    pub final_loss: f64,
    pub total_accepted: usize,
}

/// Summarizes a telemetry stream. When `window` is not given it is inferred
/// from the iterations that accepted annealing candidates.
pub fn summarize(
    records: &[TelemetryRecord],
    window: Option<(usize, usize)>,
) -> Result<TelemetrySummary> {
    let last = records
        .last()
        .ok_or_else(|| LabError::Domain("telemetry is empty".into()))?;
    let window = window.or_else(|| {
        let mut active = records.iter().filter(|r| r.accepted > 0).map(|r| r.t);
        let first = active.next()?;
        Some((first, active.next_back().unwrap_or(first)))
    });
    let sim_at = |t: usize| records.iter().find(|r| r.t == t).and_then(|r| r.min_sim);
    Ok(TelemetrySummary {
        iterations: records.len(),
        window,
        sim_at_start: window.and_then(|(s, _)| sim_at(s)),
        sim_at_end: window.and_then(|(_, e)| sim_at(e)),
        final_loss: last.loss,
        total_accepted: records.iter().map(|r| r.accepted).sum(),
    })
}

/// Writes the plotting table `t,loss,min_sim,mean_sim,accepted`.
pub fn write_report_csv<W: Write>(records: &[TelemetryRecord], mut out: W) -> Result<()> {
    writeln!(out, "t,loss,min_sim,mean_sim,accepted")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.t,
            r.loss,
            opt(r.min_sim),
            opt(r.mean_sim),
            r.accepted
        )?;
    }
    Ok(())
}
