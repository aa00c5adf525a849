use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{NormStats, ObservedStats, Tape, Var};
use crate::tensor::Tensor;

/// Batch-norm variance floor, matching the common framework default.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization scale (gamma).
    Scale,
    /// Normalization shift (beta).
    Shift,
}

/// One layer of a sequential classifier, parameters included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        name: String,
        /// `[out_ch, in_ch, k, k]`
        weight: Tensor,
        bias: Option<Tensor>,
        padding: usize,
    },
    BatchNorm {
        name: String,
        scale: Tensor,
        shift: Tensor,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Linear {
        name: String,
        /// `[in, out]`, applied as `x W + b`.
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Relu {
        name: String,
    },
    MaxPool2 {
        name: String,
    },
    GlobalAvgPool {
        name: String,
    },
    Flatten {
        name: String,
    },
}

/// How normalization layers standardize their input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Stored training statistics.
    Stored,
    /// Statistics of the batch being processed.
    Batch,
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv2d { name, .. }
            | Layer::BatchNorm { name, .. }
            | Layer::Linear { name, .. }
            | Layer::Relu { name }
            | Layer::MaxPool2 { name }
            | Layer::GlobalAvgPool { name }
            | Layer::Flatten { name } => name,
        }
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, Layer::BatchNorm { .. })
    }

    /// Parameter kinds this layer owns, in a fixed order.
    pub fn param_kinds(&self) -> Vec<ParamKind> {
        match self {
            Layer::Conv2d { bias, .. } | Layer::Linear { bias, .. } => {
                let mut v = vec![ParamKind::Weight];
                if bias.is_some() {
                    v.push(ParamKind::Bias);
                }
                v
            }
            Layer::BatchNorm { .. } => vec![ParamKind::Scale, ParamKind::Shift],
            _ => Vec::new(),
        }
    }

    pub fn param(&self, kind: ParamKind) -> Option<&Tensor> {
        match (self, kind) {
            (Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. }, ParamKind::Weight) => {
                Some(weight)
            }
            (Layer::Conv2d { bias, .. } | Layer::Linear { bias, .. }, ParamKind::Bias) => {
                bias.as_ref()
            }
            (Layer::BatchNorm { scale, .. }, ParamKind::Scale) => Some(scale),
            (Layer::BatchNorm { shift, .. }, ParamKind::Shift) => Some(shift),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> Option<&mut Tensor> {
        match (self, kind) {
            (Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. }, ParamKind::Weight) => {
                Some(weight)
            }
            (Layer::Conv2d { bias, .. } | Layer::Linear { bias, .. }, ParamKind::Bias) => {
                bias.as_mut()
            }
            (Layer::BatchNorm { scale, .. }, ParamKind::Scale) => Some(scale),
            (Layer::BatchNorm { shift, .. }, ParamKind::Shift) => Some(shift),
            _ => None,
        }
    }

    /// Records this layer on `tape`. `bind` turns a parameter into a tape
    /// node (trainable or constant, at the caller's discretion).
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        norm: NormMode,
        bind: &mut dyn FnMut(&mut Tape, ParamKind, &Tensor) -> Var,
    ) -> (Var, Option<ObservedStats>) {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                padding,
                ..
            } => {
                let w = bind(tape, ParamKind::Weight, weight);
                let b = bias.as_ref().map(|b| bind(tape, ParamKind::Bias, b));
                (tape.conv2d(x, w, b, *padding), None)
            }
            Layer::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
                ..
            } => {
                let g = bind(tape, ParamKind::Scale, scale);
                let b = bind(tape, ParamKind::Shift, shift);
                let stats = match norm {
                    NormMode::Batch => NormStats::Batch,
                    NormMode::Stored => NormStats::Fixed {
                        mean: running_mean.clone(),
                        var: running_var.clone(),
                    },
                };
                tape.batch_norm(x, g, b, &stats, BN_EPS)
            }
            Layer::Linear { weight, bias, .. } => {
                let w = bind(tape, ParamKind::Weight, weight);
                let y = tape.matmul(x, w);
                let y = match bias {
                    Some(b) => {
                        let bv = bind(tape, ParamKind::Bias, b);
                        tape.add_row(y, bv)
                    }
                    None => y,
                };
                (y, None)
            }
            Layer::Relu { .. } => (tape.relu(x), None),
            Layer::MaxPool2 { .. } => (tape.max_pool2(x), None),
            Layer::GlobalAvgPool { .. } => (tape.global_avg_pool(x), None),
            Layer::Flatten { .. } => {
                let s = tape.shape(x).to_vec();
                let rest: usize = s[1..].iter().product();
                (tape.reshape(x, &[s[0], rest]), None)
            }
        }
    }
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches element count")
}

pub fn conv2d(name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Layer {
    Layer::Conv2d {
        name: name.to_string(),
        weight: he_normal(rng, &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel),
        bias: None,
        padding: kernel / 2,
    }
}

pub fn batch_norm(name: &str, width: usize) -> Layer {
    Layer::BatchNorm {
        name: name.to_string(),
        scale: Tensor::full(&[width], 1.0),
        shift: Tensor::zeros(&[width]),
        running_mean: vec![0.0; width],
        running_var: vec![1.0; width],
    }
}

pub fn linear(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Layer {
    Layer::Linear {
        name: name.to_string(),
        weight: he_normal(rng, &[input, output], input),
        bias: Some(Tensor::zeros(&[output])),
    }
}

pub fn relu(name: &str) -> Layer {
    Layer::Relu {
        name: name.to_string(),
    }
}

pub fn max_pool2(name: &str) -> Layer {
    Layer::MaxPool2 {
        name: name.to_string(),
    }
}

pub fn global_avg_pool(name: &str) -> Layer {
    Layer::GlobalAvgPool {
        name: name.to_string(),
    }
}

pub fn flatten(name: &str) -> Layer {
    Layer::Flatten {
        name: name.to_string(),
    }
}
