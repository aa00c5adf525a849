//! The online adaptation loop: one forward pass per batch, predictions from
//! that pass, then at most one optimizer step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, DEFAULT_K1, DEFAULT_K2};
use crate::graph::{self, MaskMatrix};
use crate::model::{trainable_params, NormMode, ParamHandle, ParamPolicy, SplitModel};
use crate::objectives::{self, Branches, LossBreakdown};
use crate::optim::{Optimizer, OptimizerKind};
use crate::redundancy::{self, NrsTrace, RedundancyScore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_BATCH_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Frozen model with stored normalization statistics.
    Source,
    /// Frozen model with test-batch normalization statistics.
    BnRecal,
    /// Mean prediction entropy.
    EntropyMin,
    /// Feature redundancy score of the embeddings.
    Sfret,
    /// Graph-based contrastive and prediction losses.
    Gfret,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Source,
        Method::BnRecal,
        Method::EntropyMin,
        Method::Sfret,
        Method::Gfret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::BnRecal => "bn_recal",
            Method::EntropyMin => "entropy_min",
            Method::Sfret => "sfret",
            Method::Gfret => "gfret",
        }
    }

    /// Whether the method takes gradient steps.
    pub fn trains(self) -> bool {
        matches!(self, Method::EntropyMin | Method::Sfret | Method::Gfret)
    }

    pub fn norm_mode(self) -> NormMode {
        match self {
            Method::Source => NormMode::Stored,
            _ => NormMode::Batch,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One model persists across all segments.
    #[default]
    Continuous,
    /// Model and optimizer are reset to the source checkpoint per segment.
    Independent,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Continuous => "continuous",
            Protocol::Independent => "independent",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Protocol::Continuous),
            "independent" => Ok(Protocol::Independent),
            other => Err(Error::InvalidArgument(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub method: Method,
    pub lr: f64,
    pub lambda: f64,
    pub k1: usize,
    pub k2: f64,
    pub param_policy: ParamPolicy,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub protocol: Protocol,
    pub seed: u64,
    /// Apply the entropy/consistency filters in G-FRET.
    pub use_filters: bool,
    /// Let gradients flow through the feature graph as well as through the
    /// left factor of the propagation.
    pub attach_graph: bool,
    /// Include the head bias when projecting the propagated representations.
    pub head_bias_in_projection: bool,
    /// `d x d` symmetric mask; identity when absent.
    pub mask: Option<Tensor>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            method: Method::Gfret,
            lr: DEFAULT_LR,
            lambda: DEFAULT_LAMBDA,
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
            param_policy: ParamPolicy::default(),
            optimizer: OptimizerKind::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            protocol: Protocol::default(),
            seed: 0,
            use_filters: true,
            attach_graph: true,
            head_bias_in_projection: true,
            mask: None,
        }
    }
}

impl AdaptationConfig {
    pub fn for_method(method: Method) -> Self {
        AdaptationConfig {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.k1 == 0 {
            return bad("k1 must be at least 1".into());
        }
        if !(self.k2 > 0.0 && self.k2 <= 1.0) {
            return bad(format!("k2 must be in (0, 1], got {}", self.k2));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// One batch of the test stream. Labels are used only for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// A named run of batches sharing one distribution shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub batches: Vec<Batch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossValue {
    Breakdown(LossBreakdown),
    Scalar(f64),
}

impl LossValue {
    pub fn total(&self) -> f64 {
        match self {
            LossValue::Breakdown(b) => b.total,
            LossValue::Scalar(v) => *v,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    /// Samples that formed the class centers.
    pub center_samples: usize,
    pub valid_centers: usize,
    /// Samples that reached the losses.
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub step: u64,
    pub segment: usize,
    pub segment_name: String,
    pub batch_size: usize,
    pub n_seen: u64,
    pub batch_correct: Option<usize>,
    pub batch_accuracy: Option<f64>,
    pub cumulative_accuracy: Option<f64>,
    pub loss: Option<LossValue>,
    /// Redundancy of the embeddings from the prediction pass.
    pub redundancy: RedundancyScore,
    /// Redundancy relative to the first step of the run.
    pub nrs: f64,
    pub updated: bool,
    pub skip_reason: Option<String>,
    pub filter: Option<FilterCounts>,
}

/// Per-step output of [`adapt_step`].
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub logits: Tensor,
    pub predictions: Vec<usize>,
    pub embeddings: Tensor,
    pub loss: Option<LossValue>,
    pub updated: bool,
    pub skip_reason: Option<String>,
    pub filter: Option<FilterCounts>,
}

/// Mutable state carried across [`adapt_step`] calls.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub optimizer: Optimizer,
    pub trainable: Vec<ParamHandle>,
    pub mask: MaskMatrix,
}

impl AdaptState {
    pub fn new(model: &SplitModel, cfg: &AdaptationConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.method == Method::BnRecal && !model.has_norm_layers() {
            return Err(Error::NoNormLayers);
        }
        let trainable = if cfg.method.trains() {
            trainable_params(model, cfg.param_policy)?
        } else {
            Vec::new()
        };
        let mask = match &cfg.mask {
            Some(m) => MaskMatrix::custom(m.clone())?,
            None => MaskMatrix::identity(model.embed_dim),
        };
        if mask.dim() != model.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "mask is {0}x{0}, embeddings have width {1}",
                mask.dim(),
                model.embed_dim
            )));
        }
        Ok(AdaptState {
            optimizer: Optimizer::new(cfg.optimizer, cfg.lr),
            trainable,
            mask,
        })
    }
}

/// Predicts `batch` and, for training methods, applies one optimizer step.
/// Predictions come from the pre-update parameters. A batch whose loss is
/// non-finite or whose filters reject every sample leaves the parameters
/// untouched and reports a skip reason.
pub fn adapt_step(
    model: &mut SplitModel,
    batch: &Tensor,
    cfg: &AdaptationConfig,
    state: &mut AdaptState,
) -> Result<StepOutcome> {
    if batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let fwd = model.forward(&mut tape, x, cfg.method.norm_mode(), &state.trainable);
    let logits = tape.value(fwd.logits).clone();
    let embeddings = tape.value(fwd.embeddings).clone();
    let mut outcome = StepOutcome {
        predictions: logits.argmax_rows(),
        logits,
        embeddings,
        loss: None,
        updated: false,
        skip_reason: None,
        filter: None,
    };

    let (root, loss) = match cfg.method {
        Method::Source | Method::BnRecal => return Ok(outcome),
        Method::EntropyMin => {
            let h = objectives::softmax_entropy(&mut tape, fwd.logits);
            let n = tape.value(fwd.logits).rows() as f64;
            let root = tape.scale(h, 1.0 / n);
            (root, LossValue::Scalar(tape.scalar(root)))
        }
        Method::Sfret => {
            let root = match redundancy::sfret_loss(&mut tape, fwd.embeddings) {
                Ok(r) => r,
                Err(Error::NonFiniteLoss(what)) => {
                    outcome.skip_reason = Some(format!("non-finite {what}"));
                    return Ok(outcome);
                }
                Err(e) => return Err(e),
            };
            (root, LossValue::Scalar(tape.scalar(root)))
        }
        Method::Gfret => match gfret_objective(&mut tape, &fwd, &outcome.logits, cfg, state)? {
            GfretOutcome::Loss { root, breakdown, filter } => {
                outcome.filter = Some(filter);
                (root, LossValue::Breakdown(breakdown))
            }
            GfretOutcome::Skip { reason, filter } => {
                outcome.filter = filter;
                outcome.skip_reason = Some(reason);
                return Ok(outcome);
            }
        },
    };
    outcome.loss = Some(loss);
    if !loss.total().is_finite() {
        outcome.skip_reason = Some("non-finite loss".into());
        return Ok(outcome);
    }
    let grads = tape.backward(root);
    let updates: Vec<(ParamHandle, Vec<f64>)> = fwd
        .bound
        .iter()
        .map(|&(h, v)| (h, grads.get_or_zeros(v, tape.value(v).len())))
        .collect();
    if updates.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        outcome.skip_reason = Some("non-finite gradient".into());
        return Ok(outcome);
    }
    state.optimizer.step(model, &updates);
    outcome.updated = true;
    Ok(outcome)
}

enum GfretOutcome {
    Loss {
        root: Var,
        breakdown: LossBreakdown,
        filter: FilterCounts,
    },
    Skip {
        reason: String,
        filter: Option<FilterCounts>,
    },
}

/// encode → graphs → propagate → entropy → per-class centers → pseudo-labels
/// → consistency filter → losses on the surviving rows.
fn gfret_objective(
    tape: &mut Tape,
    fwd: &crate::model::Forward,
    logits: &Tensor,
    cfg: &AdaptationConfig,
    state: &AdaptState,
) -> Result<GfretOutcome> {
    if !logits.all_finite() || !tape.value(fwd.embeddings).all_finite() {
        return Ok(GfretOutcome::Skip {
            reason: "non-finite forward pass".into(),
            filter: None,
        });
    }
    let bias = if cfg.head_bias_in_projection {
        fwd.head_bias
    } else {
        None
    };
    let prop = graph::propagate_on_tape(
        tape,
        fwd.embeddings,
        &state.mask,
        fwd.head_weight,
        bias,
        cfg.attach_graph,
    )?;
    let n = logits.rows();
    let z = tape.value(fwd.embeddings).clone();
    let (center_rows, centers, keep) = if cfg.use_filters {
        let h = filters::entropy(logits);
        let center_rows = filters::topk_per_class(&h, logits, cfg.k1)?;
        let centers = objectives::class_centers(&z, logits, &center_rows)?;
        let labels = filters::soft_pseudo_labels(tape.value(prop.r_a), &centers)?;
        let keep = filters::consistency_filter(&h, logits, &labels, cfg.k2)?;
        (center_rows, centers, keep)
    } else {
        let all: Vec<usize> = (0..n).collect();
        let centers = objectives::class_centers(&z, logits, &all)?;
        (all.clone(), centers, all)
    };
    let filter = FilterCounts {
        center_samples: center_rows.len(),
        valid_centers: centers.num_valid(),
        kept: keep.len(),
        dropped: n - keep.len(),
    };
    if keep.is_empty() {
        return Ok(GfretOutcome::Skip {
            reason: "filters rejected every sample".into(),
            filter: Some(filter),
        });
    }
    let assign: Vec<usize> = {
        let all = logits.argmax_rows();
        keep.iter().map(|&i| all[i]).collect()
    };
    let branches = Branches {
        r_a: tape.gather_rows(prop.r_a, &keep),
        r_r: tape.gather_rows(prop.r_r, &keep),
        p_a: tape.gather_rows(prop.p_a, &keep),
        p_r: tape.gather_rows(prop.p_r, &keep),
    };
    match objectives::gfret_loss(tape, &branches, &centers, &assign, cfg.lambda) {
        Ok(l) => Ok(GfretOutcome::Loss {
            root: l.total,
            breakdown: l.breakdown,
            filter,
        }),
        Err(Error::NonFiniteLoss(what)) => Ok(GfretOutcome::Skip {
            reason: format!("non-finite {what}"),
            filter: Some(filter),
        }),
        Err(e) => Err(e),
    }
}

/// Mean Shannon entropy of the softmaxed rows of `p`.
pub fn baseline_entropy_min(p: &Tensor) -> f64 {
    filters::entropy(p).mean()
}

/// Logits of `batch` with normalization layers using the batch's own
/// statistics; no parameter is touched.
pub fn baseline_bn_recal(model: &SplitModel, batch: &Tensor) -> Result<Tensor> {
    if !model.has_norm_layers() {
        return Err(Error::NoNormLayers);
    }
    Ok(model.predict(batch, NormMode::Batch).1)
}

/// Online adapter over a stream: owns the evolving model, the source
/// checkpoint used for resets, and running accuracy/redundancy bookkeeping.
#[derive(Clone, Debug)]
pub struct Adapter {
    source: SplitModel,
    model: SplitModel,
    cfg: AdaptationConfig,
    state: AdaptState,
    step: u64,
    n_seen: u64,
    n_labeled: u64,
    correct: u64,
    nrs: NrsTrace,
}

impl Adapter {
    pub fn new(model: SplitModel, cfg: AdaptationConfig) -> Result<Self> {
        let state = AdaptState::new(&model, &cfg)?;
        Ok(Adapter {
            source: model.clone(),
            model,
            cfg,
            state,
            step: 0,
            n_seen: 0,
            n_labeled: 0,
            correct: 0,
            nrs: NrsTrace::new(),
        })
    }

    pub fn model(&self) -> &SplitModel {
        &self.model
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.cfg
    }

    pub fn nrs(&self) -> &NrsTrace {
        &self.nrs
    }

    /// Restores the source parameters and a fresh optimizer. Counters and
    /// the redundancy trace continue.
    pub fn reset(&mut self) -> Result<()> {
        self.model = self.source.clone();
        self.state = AdaptState::new(&self.model, &self.cfg)?;
        Ok(())
    }

    pub fn step(&mut self, batch: &Batch, segment: usize, segment_name: &str) -> Result<AdaptationRecord> {
        let n = batch.images.shape()[0];
        if let Some(l) = &batch.labels {
            if l.len() != n {
                return Err(Error::ShapeMismatch(format!("{n} images, {} labels", l.len())));
            }
        }
        let out = adapt_step(&mut self.model, &batch.images, &self.cfg, &mut self.state)?;
        let redundancy = redundancy::redundancy_score(&out.embeddings)?;
        let nrs = self.nrs.record(self.step, redundancy.value)?;
        self.n_seen += n as u64;
        let batch_correct = batch.labels.as_ref().map(|labels| {
            labels
                .iter()
                .zip(&out.predictions)
                .filter(|(a, b)| a == b)
                .count()
        });
        if let Some(c) = batch_correct {
            self.correct += c as u64;
            self.n_labeled += n as u64;
        }
        let record = AdaptationRecord {
            step: self.step,
            segment,
            segment_name: segment_name.to_string(),
            batch_size: n,
            n_seen: self.n_seen,
            batch_correct,
            batch_accuracy: batch_correct.map(|c| c as f64 / n as f64),
            cumulative_accuracy: (self.n_labeled > 0)
                .then(|| self.correct as f64 / self.n_labeled as f64),
            loss: out.loss,
            redundancy,
            nrs,
            updated: out.updated,
            skip_reason: out.skip_reason,
            filter: out.filter,
        };
        self.step += 1;
        Ok(record)
    }
}

/// Runs `segments` in order under `cfg.protocol`, calling `on_record` after
/// every step.
pub fn run_stream_with<I>(
    model: &SplitModel,
    segments: I,
    cfg: &AdaptationConfig,
    mut on_record: impl FnMut(&AdaptationRecord, &Adapter) -> Result<()>,
) -> Result<Adapter>
where
    I: IntoIterator<Item = Result<Segment>>,
{
    let mut adapter = Adapter::new(model.clone(), cfg.clone())?;
    for (idx, segment) in segments.into_iter().enumerate() {
        let segment = segment?;
        if idx > 0 && cfg.protocol == Protocol::Independent {
            adapter.reset()?;
        }
        for batch in &segment.batches {
            let rec = adapter.step(batch, idx, &segment.name)?;
            on_record(&rec, &adapter)?;
        }
    }
    Ok(adapter)
}

/// Runs `segments` and returns every record in order.
pub fn run_stream<I>(model: &SplitModel, segments: I, cfg: &AdaptationConfig) -> Result<Vec<AdaptationRecord>>
where
    I: IntoIterator<Item = Result<Segment>>,
{
    let mut records = Vec::new();
    run_stream_with(model, segments, cfg, |r, _| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok(records)
}
