//! Feature redundancy score, the redundancy-minimizing loss and normalized
//! redundancy traces.
//!
//! The score of an `n x d` embedding batch `Z` is the entrywise L1 norm of
//! the off-diagonal part of `Z̃ᵀZ̃`, where `Z̃` has unit-norm columns. It is
//! the sum over ordered feature pairs `i != j` of `|cos(z_:i, z_:j)|`, so it
//! lies in `[0, d(d-1)]`. An all-zero column stays zero after normalization
//! and contributes nothing.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyScore {
    pub value: f64,
    pub dim: usize,
    pub batch_size: usize,
}

fn check_batch(z: &Tensor) -> Result<(usize, usize)> {
    if z.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "embedding batch must be a matrix, got {:?}",
            z.shape()
        )));
    }
    let (n, d) = z.dims2();
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("empty embedding batch {n}x{d}")));
    }
    Ok((n, d))
}

/// Divides every column by its Euclidean norm; all-zero columns are kept.
pub fn column_normalize(z: &Tensor) -> Result<Tensor> {
    check_batch(z)?;
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let out = tape.normalize_cols(v, 0.0);
    Ok(tape.value(out).clone())
}

pub fn redundancy_score(z: &Tensor) -> Result<RedundancyScore> {
    let (n, d) = check_batch(z)?;
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let loss = redundancy_on_tape(&mut tape, v);
    Ok(RedundancyScore {
        value: tape.scalar(loss),
        dim: d,
        batch_size: n,
    })
}

fn redundancy_on_tape(tape: &mut Tape, z: Var) -> Var {
    let d = tape.shape(z)[1];
    let zn = tape.normalize_cols(z, 0.0);
    let gram = tape.gram(zn);
    let mut off = Tensor::full(&[d, d], 1.0);
    for i in 0..d {
        off.set(i, i, 0.0);
    }
    let mask = tape.constant(off);
    let offdiag = tape.mul(gram, mask);
    let mag = tape.abs(offdiag);
    tape.sum(mag)
}

/// The redundancy score of `z` as a differentiable scalar node.
pub fn sfret_loss(tape: &mut Tape, z: Var) -> Result<Var> {
    check_batch(tape.value(z))?;
    if !tape.value(z).all_finite() {
        return Err(Error::NonFiniteLoss("embedding batch"));
    }
    Ok(redundancy_on_tape(tape, z))
}

/// Redundancy over adaptation steps, normalized by the first recorded value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NrsTrace {
    pub steps: Vec<u64>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl NrsTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// True when the baseline (first raw value) is zero; every normalized
    /// value is then reported as 0.
    pub fn empty_baseline(&self) -> bool {
        self.raw.first() == Some(&0.0)
    }

    /// Appends a raw score and returns its normalized value.
    pub fn record(&mut self, step: u64, raw: f64) -> Result<f64> {
        if let Some(&last) = self.steps.last() {
            if step <= last {
                return Err(Error::StepOrder { step, last });
            }
        }
        let base = self.raw.first().copied().unwrap_or(raw);
        let normalized = if base == 0.0 { 0.0 } else { raw / base };
        self.steps.push(step);
        self.raw.push(raw);
        self.normalized.push(normalized);
        Ok(normalized)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "step,raw,normalized")?;
        for i in 0..self.len() {
            writeln!(out, "{},{},{}", self.steps[i], self.raw[i], self.normalized[i])?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut trace = NrsTrace::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format("<nrs csv>", format!("line {}: `{line}`", lineno + 1));
            let mut it = line.split(',');
            let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let raw = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let normalized = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            trace.steps.push(step);
            trace.raw.push(raw);
            trace.normalized.push(normalized);
        }
        Ok(trace)
    }
}

/// Records the redundancy of `z` at `step`.
pub fn nrs_update(trace: &mut NrsTrace, step: u64, z: &Tensor) -> Result<f64> {
    let score = redundancy_score(z)?;
    trace.record(step, score.value)
}
