//! Redundancy of the frozen model's embeddings versus corruption severity.

use std::path::Path;

use fret_core::data::{corrupt, CorruptionKind, CorruptionSpec, Dataset, ParamTable};
use fret_core::model::{NormMode, SplitModel};
use fret_core::redundancy::redundancy_score;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::plot::{draw_chart, Chart, Series};
use crate::report::mean_std;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    /// 0 is the clean baseline.
    pub severity: u8,
    /// Mean redundancy score over the batches of the dataset.
    pub mean_redundancy: f64,
    pub std_redundancy: f64,
    pub batches: usize,
    /// Accuracy of the frozen model on the same images.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub batch_size: usize,
    pub table: ParamTable,
    pub seed: u64,
}

fn score(model: &SplitModel, data: &Dataset, batch_size: usize) -> Result<(f64, f64, usize, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    // A short trailing batch has a different scale; drop it unless it is all there is.
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < batch_size) {
        chunks.pop();
    }
    let mut values = Vec::with_capacity(chunks.len());
    let (mut correct, mut seen) = (0usize, 0usize);
    for chunk in &chunks {
        let (z, logits) = model.predict(&data.to_nchw(chunk), NormMode::Stored);
        values.push(redundancy_score(&z)?.value);
        correct += logits
            .argmax_rows()
            .iter()
            .zip(chunk.iter())
            .filter(|(p, &i)| **p == data.labels[i])
            .count();
        seen += chunk.len();
    }
    let (m, s) = mean_std(&values);
    Ok((m, s, values.len(), correct as f64 / seen as f64))
}

/// One row per kind for the clean data (severity 0) followed by one row per
/// listed severity. The model is never updated.
pub fn redundancy_sweep(model: &SplitModel, data: &Dataset, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if data.is_empty() {
        return Err(HarnessError::Config("sweep dataset is empty".into()));
    }
    if spec.kinds.iter().any(|k| !k.is_native()) {
        return Err(HarnessError::Config("the sweep supports native corruptions only".into()));
    }
    let clean = score(model, data, spec.batch_size)?;
    let mut rows = Vec::new();
    for kind in &spec.kinds {
        let mut push = |severity: u8, (m, s, b, a): (f64, f64, usize, f64)| {
            rows.push(SweepRow {
                kind: kind.name().to_string(),
                severity,
                mean_redundancy: m,
                std_redundancy: s,
                batches: b,
                accuracy: a,
            })
        };
        push(0, clean);
        for &sev in &spec.severities {
            let c = CorruptionSpec::new(*kind, sev)?;
            let shifted = corrupt(data, &c, spec.table, spec.seed)?;
            push(sev, score(model, &shifted, spec.batch_size)?);
        }
    }
    Ok(rows)
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Mean redundancy versus severity, one series per kind.
pub fn plot_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        if series.last().is_none_or(|s| s.label != r.kind) {
            series.push(Series {
                label: r.kind.clone(),
                x: vec![],
                y: vec![],
            });
        }
        let s = series.last_mut().expect("just pushed");
        s.x.push(r.severity as f64);
        s.y.push(r.mean_redundancy);
    }
    draw_chart(
        &Chart {
            title: "REDUNDANCY VS SEVERITY".into(),
            x_label: "severity".into(),
            y_label: "mean redundancy".into(),
            series,
        },
        path,
    )
}
