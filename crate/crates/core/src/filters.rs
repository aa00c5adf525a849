//! Reliability filters: entropy scoring, per-class low-entropy selection for
//! centers, soft pseudo-labels and the entropy/label-consistency filter that
//! picks the samples fed to the losses.
//!
//! Entropy ties are broken by ascending sample index everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{norm, ClassCenters, COSINE_TINY};
use crate::tape::log_sum_exp;
use crate::tensor::Tensor;

pub const DEFAULT_K1: usize = 100;
pub const DEFAULT_K2: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyScores {
    /// Per-sample entropy in nats.
    pub h: Vec<f64>,
}

impl EntropyScores {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.h.iter().sum::<f64>() / self.h.len() as f64
    }

    /// Sample indices ordered by ascending entropy, ties by index.
    pub fn ascending(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.h.len()).collect();
        order.sort_by(|&a, &b| self.h[a].total_cmp(&self.h[b]).then(a.cmp(&b)));
        order
    }
}

/// Row-wise Shannon entropy of the softmax of `p`.
pub fn entropy(p: &Tensor) -> EntropyScores {
    let h = (0..p.rows())
        .map(|i| {
            let row = p.row(i);
            let lse = log_sum_exp(row);
            let h: f64 = row
                .iter()
                .map(|&x| {
                    let lp = x - lse;
                    -lp.exp() * lp
                })
                .sum();
            h.max(0.0)
        })
        .collect();
    EntropyScores { h }
}

/// For every predicted class, the `min(k1, count)` lowest-entropy samples.
/// Returned indices are sorted ascending.
pub fn topk_per_class(h: &EntropyScores, p: &Tensor, k1: usize) -> Result<Vec<usize>> {
    if k1 == 0 {
        return Err(Error::InvalidArgument("K1 must be at least 1".into()));
    }
    check_rows(h, p)?;
    let labels = p.argmax_rows();
    let mut taken = vec![0usize; p.cols()];
    let mut out: Vec<usize> = h
        .ascending()
        .into_iter()
        .filter(|&i| {
            let c = &mut taken[labels[i]];
            *c += 1;
            *c <= k1
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPseudoLabels {
    /// `n x C`, row-stochastic.
    pub y_hat: Tensor,
    /// Rows whose representation was degenerate; they carry a uniform
    /// distribution over the usable centers and never pass the
    /// consistency filter.
    pub degenerate: Vec<bool>,
}

/// Softmax over cosine similarities to the usable centers. Invalid or
/// degenerate centers get probability 0.
pub fn soft_pseudo_labels(r_a: &Tensor, centers: &ClassCenters) -> Result<SoftPseudoLabels> {
    let usable = centers.usable();
    if usable.is_empty() {
        return Err(Error::EmptySelection("no usable class center".into()));
    }
    if r_a.cols() != centers.centers.cols() {
        return Err(Error::ShapeMismatch(format!(
            "representation width {} vs center width {}",
            r_a.cols(),
            centers.centers.cols()
        )));
    }
    let c = centers.num_classes();
    let unit: Vec<Vec<f64>> = usable
        .iter()
        .map(|&j| {
            let row = centers.centers.row(j);
            let inv = 1.0 / norm(row);
            row.iter().map(|v| v * inv).collect()
        })
        .collect();
    let mut y_hat = Tensor::zeros(&[r_a.rows(), c]);
    let mut degenerate = vec![false; r_a.rows()];
    for i in 0..r_a.rows() {
        let a = r_a.row(i);
        let na = norm(a);
        if !(na >= COSINE_TINY && na.is_finite()) {
            degenerate[i] = true;
            for &j in &usable {
                y_hat.set(i, j, 1.0 / usable.len() as f64);
            }
            continue;
        }
        let sims: Vec<f64> = unit
            .iter()
            .map(|u| u.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / na)
            .collect();
        let lse = log_sum_exp(&sims);
        for (k, &j) in usable.iter().enumerate() {
            y_hat.set(i, j, (sims[k] - lse).exp());
        }
    }
    Ok(SoftPseudoLabels { y_hat, degenerate })
}

/// Samples among the `⌈k2·n⌉` lowest-entropy ones whose predicted class
/// agrees with their pseudo-label. Returned indices are sorted ascending;
/// an empty result is valid.
pub fn consistency_filter(
    h: &EntropyScores,
    p: &Tensor,
    labels: &SoftPseudoLabels,
    k2: f64,
) -> Result<Vec<usize>> {
    if !(k2 > 0.0 && k2 <= 1.0) {
        return Err(Error::InvalidArgument(format!("K2 must be in (0, 1], got {k2}")));
    }
    check_rows(h, p)?;
    if labels.y_hat.dims2() != p.dims2() {
        return Err(Error::ShapeMismatch(format!(
            "pseudo-labels {:?} vs logits {:?}",
            labels.y_hat.shape(),
            p.shape()
        )));
    }
    let n = h.len();
    let cut = ((k2 * n as f64).ceil() as usize).min(n);
    let predicted = p.argmax_rows();
    let pseudo = labels.y_hat.argmax_rows();
    let mut out: Vec<usize> = h.ascending()[..cut]
        .iter()
        .copied()
        .filter(|&i| !labels.degenerate[i] && predicted[i] == pseudo[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

fn check_rows(h: &EntropyScores, p: &Tensor) -> Result<()> {
    if h.len() != p.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} entropy scores vs {} logit rows",
            h.len(),
            p.rows()
        )));
    }
    Ok(())
}
