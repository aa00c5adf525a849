//! Supervised training of the source classifier (cross-entropy, SGD with
//! momentum, step-decayed learning rate, running normalization statistics).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{split, trainable_params, Classifier, Layer, NormMode, ParamPolicy, SplitModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the current batch in the running statistics update.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Mean cross-entropy training of `model` (whose final layer must be the
/// linear `head`). `on_epoch` sees each epoch's statistics.
pub fn train_classifier(
    model: &Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Classifier, Vec<EpochStats>)> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("training needs data and a positive batch size".into()));
    }
    let head = model.layers.last().map(|l| l.name().to_string()).unwrap_or_default();
    let mut net = split(model, &head)?;
    let params = trainable_params(&net, ParamPolicy::Full)?;
    let kind = OptimizerKind::Sgd {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = Optimizer::new(kind, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * step_decay(epoch, cfg.epochs);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, hits) = train_step(&mut net, &mut opt, &params, data, chunk, &labels, cfg)?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((net.to_classifier(), history))
}

/// 1 for the first half, 0.1 until three quarters, then 0.01.
fn step_decay(epoch: usize, epochs: usize) -> f64 {
    let f = epoch as f64 / epochs.max(1) as f64;
    if f < 0.5 {
        1.0
    } else if f < 0.75 {
        0.1
    } else {
        0.01
    }
}

fn train_step(
    net: &mut SplitModel,
    opt: &mut Optimizer,
    params: &[crate::model::ParamHandle],
    data: &Dataset,
    chunk: &[usize],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(data.to_nchw(chunk));
    let fwd = net.forward(&mut tape, x, NormMode::Batch, params);
    let hits = tape
        .value(fwd.logits)
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    let log_p = tape.log_softmax(fwd.logits);
    let picked = tape.pick_per_row(log_p, labels);
    let total = tape.sum(picked);
    let loss = tape.scale(total, -1.0 / chunk.len() as f64);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("training cross-entropy"));
    }
    let grads = tape.backward(loss);
    let updates: Vec<_> = fwd
        .bound
        .iter()
        .map(|&(h, v)| (h, grads.get_or_zeros(v, tape.value(v).len())))
        .collect();
    opt.step(net, &updates);
    for (idx, obs) in &fwd.observed {
        if let Layer::BatchNorm {
            running_mean,
            running_var,
            ..
        } = net.layer_mut(*idx)
        {
            let m = cfg.bn_momentum;
            let unbias = obs.count as f64 / (obs.count as f64 - 1.0).max(1.0);
            for c in 0..running_mean.len() {
                running_mean[c] = (1.0 - m) * running_mean[c] + m * obs.mean[c];
                running_var[c] = (1.0 - m) * running_var[c] + m * obs.var[c] * unbias;
            }
        }
    }
    Ok((value, hits))
}

/// Top-1 accuracy of `model` on `data` with stored normalization statistics.
pub fn evaluate(model: &Classifier, data: &Dataset, batch_size: usize) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let correct: usize = idx
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let logits = model.logits(&data.to_nchw(chunk), NormMode::Stored);
            logits
                .argmax_rows()
                .iter()
                .zip(chunk)
                .filter(|(p, &i)| **p == data.labels[i])
                .count()
        })
        .sum();
    correct as f64 / data.len().max(1) as f64
}
