//! Encoder/head decomposition of a sequential classifier and control over
//! which parameters adaptation may touch.
//!
//! A [`Classifier`] is a named sequence of [`Layer`]s. [`split`] cuts it in
//! front of its final affine layer, giving a [`SplitModel`] whose encoder
//! produces the `n x d` embedding batch and whose head maps embeddings to
//! `n x C` logits.

mod layers;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{ObservedStats, Tape, Var};
use crate::tensor::Tensor;

pub use layers::{
    batch_norm, conv2d, flatten, global_avg_pool, linear, max_pool2, relu, Layer, NormMode,
    ParamKind, BN_EPS,
};

const CHECKPOINT_FORMAT: &str = "fret-classifier";
const CHECKPOINT_VERSION: u32 = 1;

/// A sequential classifier before it has been split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// Per-sample input shape, e.g. `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: Classifier,
}

impl Classifier {
    /// Three conv/BN/ReLU stages, global average pooling and a linear head
    /// named `head`. The embedding width equals the last entry of `widths`.
    pub fn small_cnn(
        input_shape: [usize; 3],
        widths: &[usize],
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut ch = input_shape[0];
        for (i, &w) in widths.iter().enumerate() {
            let k = i + 1;
            layers.push(conv2d(&format!("conv{k}"), ch, w, 3, rng));
            layers.push(batch_norm(&format!("bn{k}"), w));
            layers.push(relu(&format!("relu{k}")));
            if i + 1 < widths.len() {
                layers.push(max_pool2(&format!("pool{k}")));
            }
            ch = w;
        }
        layers.push(global_avg_pool("gap"));
        layers.push(linear("head", ch, num_classes, rng));
        Classifier {
            input_shape: input_shape.to_vec(),
            layers,
        }
    }

    /// `fc1 -> relu -> head`, optionally with a batch norm after `fc1`.
    pub fn mlp(
        inputs: usize,
        hidden: usize,
        num_classes: usize,
        with_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = vec![linear("fc1", inputs, hidden, rng)];
        if with_norm {
            layers.push(batch_norm("bn1", hidden));
        }
        layers.push(relu("relu1"));
        layers.push(linear("head", hidden, num_classes, rng));
        Classifier {
            input_shape: vec![inputs],
            layers,
        }
    }

    /// Full forward pass with every parameter held constant.
    pub fn logits(&self, x: &Tensor, norm: NormMode) -> Tensor {
        let mut tape = Tape::new();
        let mut v = tape.constant(x.clone());
        for layer in &self.layers {
            v = layer
                .forward(&mut tape, v, norm, &mut |t, _, p| t.constant(p.clone()))
                .0;
        }
        tape.value(v).clone()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&file)
            .map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", file.format, file.version),
            ));
        }
        Ok(file.model)
    }
}

/// Identifies one parameter tensor of a [`SplitModel`]. `layer` indexes the
/// encoder layers; the head sits at index `encoder.len()`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamHandle {
    pub layer: usize,
    pub kind: ParamKind,
}

impl fmt::Display for ParamHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}", self.layer, self.kind)
    }
}

/// Which parameters the adaptation loop may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamPolicy {
    /// Scale and shift of every normalization layer.
    #[default]
    NormAffineOnly,
    /// Weight and bias of the classification head.
    HeadOnly,
    /// Weights and biases of conv/linear layers (encoder and head);
    /// normalization affine parameters stay frozen.
    EncoderAndHead,
    /// Every parameter.
    Full,
}

impl std::str::FromStr for ParamPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm_affine_only" => Ok(ParamPolicy::NormAffineOnly),
            "head_only" => Ok(ParamPolicy::HeadOnly),
            "encoder_and_head" => Ok(ParamPolicy::EncoderAndHead),
            "full" => Ok(ParamPolicy::Full),
            other => Err(Error::InvalidArgument(format!("unknown param policy `{other}`"))),
        }
    }
}

/// A classifier decomposed into encoder `f` and affine head `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    pub input_shape: Vec<usize>,
    pub encoder: Vec<Layer>,
    /// Always a [`Layer::Linear`].
    pub head: Layer,
    pub embed_dim: usize,
    pub num_classes: usize,
}

/// Tape nodes produced by [`SplitModel::forward`].
pub struct Forward {
    /// `n x d` embeddings.
    pub embeddings: Var,
    /// `n x C` logits.
    pub logits: Var,
    pub head_weight: Var,
    pub head_bias: Option<Var>,
    /// Trainable parameters bound on the tape.
    pub bound: Vec<(ParamHandle, Var)>,
    /// Batch statistics observed per normalization layer (encoder index).
    pub observed: Vec<(usize, ObservedStats)>,
}

/// Cuts `model` in front of the layer named `cut`, which must be the final
/// layer and affine.
pub fn split(model: &Classifier, cut: &str) -> Result<SplitModel> {
    let idx = model
        .layers
        .iter()
        .position(|l| l.name() == cut)
        .ok_or_else(|| Error::UnsupportedArchitecture(format!("no layer named `{cut}`")))?;
    if idx + 1 != model.layers.len() {
        return Err(Error::UnsupportedArchitecture(format!(
            "`{cut}` is not the final layer"
        )));
    }
    let head = model.layers[idx].clone();
    let Layer::Linear { weight, .. } = &head else {
        return Err(Error::UnsupportedArchitecture(format!(
            "`{cut}` is not an affine layer"
        )));
    };
    let (embed_dim, num_classes) = weight.dims2();
    let mut names = BTreeSet::new();
    for l in &model.layers {
        if !names.insert(l.name()) {
            return Err(Error::UnsupportedArchitecture(format!(
                "duplicate layer name `{}`",
                l.name()
            )));
        }
    }
    let split = SplitModel {
        input_shape: model.input_shape.clone(),
        encoder: model.layers[..idx].to_vec(),
        head,
        embed_dim,
        num_classes,
    };
    // Probe the encoder once so a width mismatch surfaces here.
    let mut probe_shape = vec![2];
    probe_shape.extend(&model.input_shape);
    let z = split.embed(&Tensor::zeros(&probe_shape), NormMode::Stored);
    if z.shape() != [2, embed_dim] {
        return Err(Error::UnsupportedArchitecture(format!(
            "encoder emits {:?}, head expects width {embed_dim}",
            z.shape()
        )));
    }
    Ok(split)
}

/// Parameter handles selected by `policy`, in layer order.
pub fn trainable_params(model: &SplitModel, policy: ParamPolicy) -> Result<Vec<ParamHandle>> {
    let head_idx = model.encoder.len();
    let handles: Vec<ParamHandle> = model
        .all_params()
        .into_iter()
        .filter(|h| {
            let is_norm = matches!(h.kind, ParamKind::Scale | ParamKind::Shift);
            match policy {
                ParamPolicy::NormAffineOnly => is_norm,
                ParamPolicy::HeadOnly => h.layer == head_idx,
                ParamPolicy::EncoderAndHead => !is_norm,
                ParamPolicy::Full => true,
            }
        })
        .collect();
    if handles.is_empty() {
        return Err(Error::EmptySelection(format!("policy {policy:?} matched no parameters")));
    }
    Ok(handles)
}

impl SplitModel {
    pub fn layer(&self, idx: usize) -> &Layer {
        if idx == self.encoder.len() {
            &self.head
        } else {
            &self.encoder[idx]
        }
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut Layer {
        if idx == self.encoder.len() {
            &mut self.head
        } else {
            &mut self.encoder[idx]
        }
    }

    /// Every parameter handle, each exactly once, in layer order.
    pub fn all_params(&self) -> Vec<ParamHandle> {
        (0..=self.encoder.len())
            .flat_map(|layer| {
                self.layer(layer)
                    .param_kinds()
                    .into_iter()
                    .map(move |kind| ParamHandle { layer, kind })
            })
            .collect()
    }

    pub fn param(&self, h: ParamHandle) -> &Tensor {
        self.layer(h.layer)
            .param(h.kind)
            .unwrap_or_else(|| panic!("no parameter {h}"))
    }

    pub fn param_mut(&mut self, h: ParamHandle) -> &mut Tensor {
        self.layer_mut(h.layer)
            .param_mut(h.kind)
            .unwrap_or_else(|| panic!("no parameter {h}"))
    }

    pub fn param_name(&self, h: ParamHandle) -> String {
        format!("{}.{:?}", self.layer(h.layer).name(), h.kind).to_lowercase()
    }

    pub fn has_norm_layers(&self) -> bool {
        self.encoder.iter().any(Layer::is_norm)
    }

    /// Reassembles the wrapped classifier.
    pub fn to_classifier(&self) -> Classifier {
        let mut layers = self.encoder.clone();
        layers.push(self.head.clone());
        Classifier {
            input_shape: self.input_shape.clone(),
            layers,
        }
    }

    /// Records encoder and head on `tape`. Handles in `trainable` become
    /// gradient-carrying leaves; every other parameter is a constant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        norm: NormMode,
        trainable: &[ParamHandle],
    ) -> Forward {
        let mut bound = Vec::new();
        let mut observed = Vec::new();
        let mut v = x;
        for (idx, layer) in self.encoder.iter().enumerate() {
            let mut bind = |t: &mut Tape, kind: ParamKind, p: &Tensor| {
                let h = ParamHandle { layer: idx, kind };
                let grad = trainable.contains(&h);
                let var = t.leaf(p.clone(), grad);
                if grad {
                    bound.push((h, var));
                }
                var
            };
            let (out, stats) = layer.forward(tape, v, norm, &mut bind);
            if let Some(s) = stats {
                observed.push((idx, s));
            }
            v = out;
        }
        let embeddings = v;
        let head_idx = self.encoder.len();
        let Layer::Linear { weight, bias, .. } = &self.head else {
            unreachable!("head is linear by construction")
        };
        let mut bind_head = |t: &mut Tape, kind: ParamKind, p: &Tensor| {
            let h = ParamHandle {
                layer: head_idx,
                kind,
            };
            let grad = trainable.contains(&h);
            let var = t.leaf(p.clone(), grad);
            if grad {
                bound.push((h, var));
            }
            var
        };
        let head_weight = bind_head(tape, ParamKind::Weight, weight);
        let head_bias = bias.as_ref().map(|b| bind_head(tape, ParamKind::Bias, b));
        let logits = self.apply_head_vars(tape, embeddings, head_weight, head_bias);
        Forward {
            embeddings,
            logits,
            head_weight,
            head_bias,
            bound,
            observed,
        }
    }

    /// `r W (+ b)` using head nodes already on the tape.
    pub fn apply_head_vars(&self, tape: &mut Tape, r: Var, w: Var, b: Option<Var>) -> Var {
        let y = tape.matmul(r, w);
        match b {
            Some(b) => tape.add_row(y, b),
            None => y,
        }
    }

    /// Embeddings with all parameters frozen.
    pub fn embed(&self, x: &Tensor, norm: NormMode) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, xv, norm, &[]);
        tape.value(f.embeddings).clone()
    }

    /// Head applied to a plain embedding matrix.
    pub fn head_logits(&self, z: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let Layer::Linear { weight, bias, .. } = &self.head else {
            unreachable!("head is linear by construction")
        };
        let w = tape.constant(weight.clone());
        let b = bias.as_ref().map(|b| tape.constant(b.clone()));
        let y = self.apply_head_vars(&mut tape, zv, w, b);
        tape.value(y).clone()
    }

    /// Embeddings and logits with all parameters frozen.
    pub fn predict(&self, x: &Tensor, norm: NormMode) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, xv, norm, &[]);
        (tape.value(f.embeddings).clone(), tape.value(f.logits).clone())
    }
}
