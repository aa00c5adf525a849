//! Long-tailed label-shift subsampling.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{rng_for, Dataset, PURPOSE_LONGTAIL};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongTailProfile {
    /// `n_k = n_max · IF^(-k/(C-1))` for class rank `k`.
    #[default]
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub imbalance_factor: f64,
    #[serde(default)]
    pub profile: LongTailProfile,
    /// Head-class count; defaults to the smallest class size available.
    #[serde(default)]
    pub max_per_class: Option<usize>,
}

impl LongTailSpec {
    pub fn new(imbalance_factor: f64) -> Self {
        LongTailSpec {
            imbalance_factor,
            profile: LongTailProfile::Exponential,
            max_per_class: None,
        }
    }
}

/// Per-class target counts; class index is the rank.
pub fn longtail_counts(n_max: usize, num_classes: usize, imbalance_factor: f64) -> Result<Vec<usize>> {
    if !(imbalance_factor >= 1.0 && imbalance_factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "imbalance factor must be >= 1, got {imbalance_factor}"
        )));
    }
    if num_classes <= 1 {
        return Ok(vec![n_max; num_classes]);
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|k| (n_max as f64 * imbalance_factor.powf(-(k as f64) / last)).round() as usize)
        .collect())
}

/// Indices (ascending) of a long-tailed subsample drawn without
/// replacement.
pub(crate) fn longtail_indices(ds: &Dataset, spec: &LongTailSpec, seed: u64) -> Result<Vec<usize>> {
    let available = ds.class_counts();
    let n_max = spec
        .max_per_class
        .unwrap_or_else(|| available.iter().copied().min().unwrap_or(0));
    let targets = longtail_counts(n_max, ds.num_classes(), spec.imbalance_factor)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keep = Vec::new();
    for (k, members) in by_class.iter().enumerate() {
        if members.len() < targets[k] {
            return Err(Error::InsufficientSamples {
                class: k,
                available: members.len(),
                required: targets[k],
            });
        }
        let mut rng = rng_for(seed, PURPOSE_LONGTAIL, k as u64);
        keep.extend(
            index::sample(&mut rng, members.len(), targets[k])
                .into_iter()
                .map(|j| members[j]),
        );
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Long-tailed subsample of `ds`, in original order.
pub fn longtail_subsample(ds: &Dataset, spec: &LongTailSpec, seed: u64) -> Result<Dataset> {
    Ok(ds.subset(&longtail_indices(ds, spec, seed)?))
}
