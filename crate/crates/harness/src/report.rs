//! Per-run summaries and the `summary.csv` table.

use std::collections::BTreeMap;
use std::path::Path;

use fret_core::engine::AdaptationRecord;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Segment name used for the whole-stream row of multi-segment runs.
pub const ALL_SEGMENTS: &str = "all";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub protocol: String,
    pub segment: String,
    pub seed: u64,
    /// Online accuracy over the segment.
    pub final_accuracy: f64,
    /// Least-squares slope of the normalized redundancy score per step.
    pub mean_nrs_slope: f64,
    pub wall_clock_s: f64,
    /// Mean of `final_accuracy` over the seeds of this method and segment.
    pub accuracy_mean: f64,
    /// Sample standard deviation of the same (0 for a single seed).
    pub accuracy_std: f64,
}

/// Least-squares slope of `y` against `x`; 0 with fewer than two points.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..n {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// Summary rows for one run: one per segment (in stream order), plus an
/// [`ALL_SEGMENTS`] row when the stream has several segments. `seconds`
/// holds the wall-clock time of every step. Aggregate columns are left at
/// zero for [`fill_aggregates`].
pub fn summarize_run(
    method: &str,
    protocol: &str,
    seed: u64,
    records: &[AdaptationRecord],
    seconds: &[f64],
) -> Vec<SummaryRow> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match groups.last_mut() {
            Some((name, idx)) if *name == r.segment_name && records[idx[0]].segment == r.segment => {
                idx.push(i)
            }
            _ => groups.push((r.segment_name.clone(), vec![i])),
        }
    }
    if groups.len() > 1 {
        groups.push((ALL_SEGMENTS.to_string(), (0..records.len()).collect()));
    }
    groups
        .into_iter()
        .map(|(segment, idx)| {
            let (mut correct, mut labeled) = (0usize, 0usize);
            for &i in &idx {
                if let Some(c) = records[i].batch_correct {
                    correct += c;
                    labeled += records[i].batch_size;
                }
            }
            let x: Vec<f64> = idx.iter().map(|&i| records[i].step as f64).collect();
            let y: Vec<f64> = idx.iter().map(|&i| records[i].nrs).collect();
            SummaryRow {
                method: method.to_string(),
                protocol: protocol.to_string(),
                segment,
                seed,
                final_accuracy: if labeled > 0 {
                    correct as f64 / labeled as f64
                } else {
                    f64::NAN
                },
                mean_nrs_slope: slope(&x, &y),
                wall_clock_s: idx.iter().map(|&i| seconds.get(i).copied().unwrap_or(0.0)).sum(),
                accuracy_mean: 0.0,
                accuracy_std: 0.0,
            }
        })
        .collect()
}

/// Fills `accuracy_mean`/`accuracy_std` per (method, protocol, segment) and
/// sorts rows by method, protocol, segment, seed.
pub fn fill_aggregates(rows: &mut [SummaryRow]) {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter() {
        groups
            .entry((r.method.clone(), r.protocol.clone(), r.segment.clone()))
            .or_default()
            .push(r.final_accuracy);
    }
    for r in rows.iter_mut() {
        let (m, s) = mean_std(&groups[&(r.method.clone(), r.protocol.clone(), r.segment.clone())]);
        r.accuracy_mean = m;
        r.accuracy_std = s;
    }
    rows.sort_by(|a, b| {
        (&a.method, &a.protocol, &a.segment, a.seed).cmp(&(&b.method, &b.protocol, &b.segment, b.seed))
    });
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::io(path, io),
        other => HarnessError::Log {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Writes records as JSON lines.
pub fn write_jsonl(records: &[AdaptationRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AdaptationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Log {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
