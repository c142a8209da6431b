use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, backward, forward_from, mean_loss, random_dense, update_running_stats, AdamConfig, AdamState,
    LayerSpec, MlpModel, Mode, Task,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 50,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch's batches.
    pub loss: f64,
    /// Inference-mode accuracy on the training set after the epoch.
    pub train_acc: f64,
}

/// One-hot (multiclass) or multi-hot (multilabel) target matrix.
pub fn targets_from_labels(labels: &[BTreeSet<u32>], classes: usize, task: Task) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, ls) in labels.iter().enumerate() {
        if ls.is_empty() {
            return Err(Error::InvalidArgument(format!("sample {i} has no label")));
        }
        if task == Task::Multiclass && ls.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has {} labels in a multiclass task",
                ls.len()
            )));
        }
        for &l in ls {
            if l as usize >= classes {
                return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
            }
            y[[i, l as usize]] = 1.0;
        }
    }
    Ok(y)
}

/// Fraction of rows whose highest-scoring class is one of their labels.
pub fn accuracy(scores: ArrayView2<f64>, labels: &[BTreeSet<u32>]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, ls)| ls.contains(&(argmax(row.iter().copied()) as u32)))
        .count();
    hits as f64 / labels.len() as f64
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub(crate) fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    argmax(row.iter().copied())
}

/// Inference-mode class scores.
pub fn predict(model: &MlpModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    // infer mode draws no random numbers
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let acts = forward_from(model, 0, x, Mode::Infer, &mut rng)?;
    Ok(acts.layers.into_iter().last().expect("non-empty").output)
}

/// Leading layers that behave identically in train and infer mode and never
/// change; their output is computed once per training run.
fn frozen_prefix(model: &MlpModel) -> usize {
    model
        .layers
        .iter()
        .take_while(|l| !l.spec.trainable && l.bn.is_none() && l.spec.dropout_p == 0.0)
        .count()
}

pub(crate) fn batches(order: &[usize], batch_size: usize, merge_singleton: bool) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if merge_singleton && out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let prev = out.pop().expect("len > 1");
        let start = order.len() - prev.len() - 1;
        out.push(&order[start..]);
    }
    out
}

/// Mini-batch Adam on the batch-averaged loss. Deterministic for a given
/// seed: the same RNG stream drives shuffling and dropout masks.
pub fn train(
    mut model: MlpModel,
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochStats>)> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("training set is empty".into()));
    }
    if x.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: x.ncols(),
        });
    }
    if targets.dim() != (n, model.class_count()) {
        return Err(Error::InvalidArgument(format!(
            "targets {:?} do not match {n} samples x {} classes",
            targets.dim(),
            model.class_count()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let needs_pairs = model.has_bn();
    if needs_pairs && n < 2 {
        return Err(Error::InvalidArgument("batch norm needs at least 2 training samples".into()));
    }
    let labels: Vec<BTreeSet<u32>> = targets
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i as u32).collect())
        .collect();

    let start = frozen_prefix(&model);
    if start == model.layers.len() {
        return Err(Error::InvalidArgument("network has no trainable layers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = if start > 0 {
        let mut tmp = ChaCha8Rng::seed_from_u64(0);
        let sub = MlpModel {
            layers: model.layers[..start].to_vec(),
            task: model.task,
        };
        forward_prefix(&sub, x, &mut tmp)?
    } else {
        x.to_owned()
    };

    let mut state = AdamState::new(cfg.adam, &model.param_block_sizes());
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in batches(&order, cfg.batch_size, needs_pairs) {
            let xb = h.select(Axis(0), idx);
            let yb = targets.select(Axis(0), idx);
            let acts = forward_from(&model, start, xb.view(), Mode::Train, &mut rng)?;
            total += mean_loss(acts.output().view(), yb.view(), model.task)? * idx.len() as f64;
            let grads = backward(&model, &acts, yb.view())?;
            update_running_stats(&mut model, &acts);
            adam_step(&mut state, &mut model.params_mut(), &grads.blocks())?;
        }
        let mut tmp = ChaCha8Rng::seed_from_u64(0);
        let scores = forward_from(&model, start, h.view(), Mode::Infer, &mut tmp)?;
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
        }
        trace.push(EpochStats {
            epoch,
            loss,
            train_acc: accuracy(scores.output().view(), &labels),
        });
    }
    Ok((model, trace))
}

fn forward_prefix(prefix: &MlpModel, x: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let acts = forward_from(prefix, 0, x, Mode::Infer, rng)?;
    Ok(acts.layers.into_iter().last().expect("non-empty").output)
}

/// Swaps the classification layer for a freshly initialized one with
/// `new_classes` outputs. Returns the optimizer settings for fine-tuning:
/// the same Adam configuration with a tenfold smaller step size.
pub fn replace_output_layer(
    model: &MlpModel,
    new_classes: usize,
    seed: u64,
    base: &AdamConfig,
) -> Result<(MlpModel, AdamConfig)> {
    if new_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 target classes".into()));
    }
    let mut out = model.clone();
    let last = out.layers.pop().ok_or_else(|| Error::InvalidArgument("empty network".into()))?;
    let spec = LayerSpec::output(last.spec.in_dim, new_classes, out.task);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.layers.push(random_dense(spec, &mut rng));
    out.validate()?;
    Ok((
        out,
        AdamConfig {
            alpha: base.alpha / 10.0,
            ..*base
        },
    ))
}
