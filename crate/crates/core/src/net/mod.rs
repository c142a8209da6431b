//! Fully connected supervised layers: batch normalization, ReLU, inverted
//! dropout, softmax/sigmoid outputs, exact backpropagation and Adam.

mod adam;
mod loss;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduction::{l2_rows, ReductionLayer};

pub use adam::{adam_step, AdamConfig, AdamState, AdamVariant};
pub use loss::{loss, mean_loss, PROB_CLAMP};
pub use train::{accuracy, predict, replace_output_layer, targets_from_labels, train, EpochStats, TrainConfig};
#[cfg(test)]
use train::batches;
pub(crate) use train::argmax_row;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    Sigmoid,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Multiclass,
    Multilabel,
}

impl Task {
    pub fn output_activation(self) -> Activation {
        match self {
            Task::Multiclass => Activation::Softmax,
            Task::Multilabel => Activation::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub has_bn: bool,
    pub activation: Activation,
    pub trainable: bool,
    pub dropout_p: f64,
    /// Row-wise ℓ2 normalization of the output (frozen PCA reduction layer).
    pub l2_output: bool,
}

impl LayerSpec {
    pub fn hidden(in_dim: usize, out_dim: usize, has_bn: bool, dropout_p: f64) -> Self {
        Self {
            in_dim,
            out_dim,
            has_bn,
            activation: Activation::Relu,
            trainable: true,
            dropout_p,
            l2_output: false,
        }
    }

    pub fn output(in_dim: usize, classes: usize, task: Task) -> Self {
        Self {
            in_dim,
            out_dim: classes,
            has_bn: false,
            activation: task.output_activation(),
            trainable: true,
            dropout_p: 0.0,
            l2_output: false,
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
    /// Number of batches folded into the running statistics so far.
    pub updates: u64,
}

impl BatchNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            updates: 0,
        }
    }

    /// Exponential moving average with a bias-corrected rate, so the first
    /// batches are not swamped by the (0, 1) initial statistics.
    fn update(&mut self, mean: &Array1<f64>, var: &Array1<f64>) {
        self.updates += 1;
        let rate = (1.0 - self.momentum).max(1.0 / self.updates as f64);
        self.running_mean.zip_mut_with(mean, |r, &b| *r += rate * (b - *r));
        self.running_var.zip_mut_with(var, |r, &b| *r += rate * (b - *r));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub spec: LayerSpec,
    /// out_dim x in_dim.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
    pub task: Task,
}

impl MlpModel {
    /// Builds a net from layer specs, drawing weights uniformly from
    /// `±1/sqrt(fan_in)` with zero biases. An optional frozen reduction layer
    /// is placed first.
    pub fn new(first: Option<&ReductionLayer>, specs: &[LayerSpec], task: Task, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len() + 1);
        if let Some(red) = first {
            layers.push(frozen_reduction(red));
        }
        for spec in specs {
            layers.push(random_dense(*spec, &mut rng));
        }
        let model = Self { layers, task };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::InvalidArgument("network has no layers".into()))?;
        if last.spec.has_bn || last.spec.activation != self.task.output_activation() || last.spec.dropout_p != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "output layer must be {:?} without batch norm or dropout",
                self.task.output_activation()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let s = &l.spec;
            if l.weights.dim() != (s.out_dim, s.in_dim) || l.bias.len() != s.out_dim {
                return Err(Error::InvalidArgument(format!("layer {i} parameter shapes disagree with spec")));
            }
            if s.has_bn != l.bn.is_some() {
                return Err(Error::InvalidArgument(format!("layer {i} batch-norm flag mismatch")));
            }
            if !(0.0..1.0).contains(&s.dropout_p) {
                return Err(Error::InvalidArgument(format!("layer {i} dropout {} outside [0,1)", s.dropout_p)));
            }
            if i + 1 < self.layers.len() {
                if matches!(s.activation, Activation::Softmax | Activation::Sigmoid) {
                    return Err(Error::InvalidArgument(format!("hidden layer {i} uses an output nonlinearity")));
                }
                if self.layers[i + 1].spec.in_dim != s.out_dim {
                    return Err(Error::InvalidArgument(format!(
                        "layer {} expects {} inputs, layer {i} produces {}",
                        i + 1,
                        self.layers[i + 1].spec.in_dim,
                        s.out_dim
                    )));
                }
            }
            if s.l2_output && (s.has_bn || s.activation != Activation::None) {
                return Err(Error::InvalidArgument(format!("layer {i}: l2 output must be purely linear")));
            }
            let finite = l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map(|l| l.spec.out_dim).unwrap_or(0)
    }

    fn has_bn(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    /// Sizes of the trainable parameter blocks, in [`Self::params_mut`] order.
    pub fn param_block_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.spec.trainable)
            .flat_map(|l| {
                let mut v = vec![l.weights.len(), l.bias.len()];
                if l.bn.is_some() {
                    v.extend([l.spec.out_dim, l.spec.out_dim]);
                }
                v
            })
            .collect()
    }

    /// Trainable parameters per layer: weights, bias, then BN gamma and beta.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.layers.iter_mut().filter(|l| l.spec.trainable) {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = l.bn.as_mut() {
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }
}

fn frozen_reduction(red: &ReductionLayer) -> Dense {
    let (out_dim, in_dim) = red.weights.dim();
    Dense {
        spec: LayerSpec {
            in_dim,
            out_dim,
            has_bn: false,
            activation: Activation::None,
            trainable: false,
            dropout_p: 0.0,
            l2_output: true,
        },
        weights: red.weights.as_standard_layout().to_owned(),
        bias: Array1::from(red.offset.clone()),
        bn: None,
    }
}

pub(crate) fn random_dense(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Dense {
    let bound = 1.0 / (spec.in_dim.max(1) as f64).sqrt();
    let weights = Array2::from_shape_simple_fn((spec.out_dim, spec.in_dim), || rng.random_range(-bound..=bound));
    Dense {
        spec,
        weights,
        bias: Array1::zeros(spec.out_dim),
        bn: spec.has_bn.then(|| BatchNormParams::new(spec.out_dim)),
    }
}

/// Intermediates of one layer kept for backpropagation.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Array2<f64>,
    /// Pre-normalization affine output `h W^t + b`.
    pub z: Array2<f64>,
    /// BN normalized values and per-feature `1/sqrt(var + eps)`.
    pub bn: Option<(Array2<f64>, Array1<f64>)>,
    /// Batch mean and variance, for updating running statistics.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    /// Post-nonlinearity, pre-dropout output.
    pub activated: Array2<f64>,
    /// Dropout multipliers (0 or 1/(1-p)), when dropout was applied.
    pub mask: Option<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Activations {
    /// Index of the first layer the caches refer to.
    pub start: usize,
    pub layers: Vec<LayerCache>,
}

impl Activations {
    pub fn output(&self) -> &Array2<f64> {
        &self.layers.last().expect("at least one layer").output
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Runs the network on a batch. Train mode uses batch statistics and
/// samples dropout masks from `rng`; infer mode uses running statistics and
/// no dropout.
pub fn forward(model: &MlpModel, batch: ArrayView2<f64>, mode: Mode, rng: &mut impl Rng) -> Result<Activations> {
    forward_from(model, 0, batch, mode, rng)
}

/// Like [`forward`] but starting at layer `start`, whose input is `batch`.
pub fn forward_from(
    model: &MlpModel,
    start: usize,
    batch: ArrayView2<f64>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Activations> {
    let first = model
        .layers
        .get(start)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {start}")))?;
    if batch.ncols() != first.spec.in_dim {
        return Err(Error::DimensionMismatch {
            expected: first.spec.in_dim,
            actual: batch.ncols(),
        });
    }
    let n = batch.nrows();
    if n == 0 {
        return Err(Error::Empty("forward on an empty batch".into()));
    }
    if mode == Mode::Train && n < 2 && model.layers[start..].iter().any(|l| l.bn.is_some()) {
        return Err(Error::InvalidArgument(
            "train-mode batch norm needs a batch of at least 2".into(),
        ));
    }

    let mut caches = Vec::with_capacity(model.layers.len() - start);
    let mut input = batch.to_owned();
    for layer in &model.layers[start..] {
        let s = &layer.spec;
        let z = input.dot(&layer.weights.t()) + &layer.bias;
        let (mut pre, bn_cache, stats) = match (&layer.bn, mode) {
            (Some(bn), Mode::Train) => {
                let mean = z.mean_axis(Axis(0)).expect("n > 0");
                let centered = &z - &mean;
                let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("n > 0");
                let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                let xhat = &centered * &inv_std;
                let y = &xhat * &bn.gamma + &bn.beta;
                (y, Some((xhat, inv_std)), Some((mean, var)))
            }
            (Some(bn), Mode::Infer) => {
                let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                let y = (&z - &bn.running_mean) * &inv_std * &bn.gamma + &bn.beta;
                (y, None, None)
            }
            (None, _) => (z.clone(), None, None),
        };
        match s.activation {
            Activation::Relu => pre.mapv_inplace(|v| v.max(0.0)),
            Activation::Softmax => softmax_rows(&mut pre),
            Activation::Sigmoid => pre.mapv_inplace(sigmoid),
            Activation::None => {}
        }
        if s.l2_output {
            l2_rows(&mut pre);
        }
        let activated = pre;
        let (output, mask) = if mode == Mode::Train && s.dropout_p > 0.0 {
            let keep = 1.0 - s.dropout_p;
            let scale = 1.0 / keep;
            let mask = Array2::from_shape_simple_fn(activated.dim(), || {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            });
            (&activated * &mask, Some(mask))
        } else {
            (activated.clone(), None)
        };
        caches.push(LayerCache {
            input,
            z,
            bn: bn_cache,
            batch_stats: stats,
            activated,
            mask,
            output: output.clone(),
        });
        input = output;
    }
    Ok(Activations { start, layers: caches })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

/// Per-layer gradients; frozen layers (and layers before the cached range)
/// get `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrads>>,
}

impl Gradients {
    /// Gradient blocks in the same order as [`MlpModel::params_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in self.layers.iter().flatten() {
            out.push(g.weights.as_slice().expect("standard layout"));
            out.push(g.bias.as_slice().expect("standard layout"));
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.push(gm.as_slice().expect("standard layout"));
                out.push(bt.as_slice().expect("standard layout"));
            }
        }
        out
    }
}

/// Exact gradients of the batch-averaged loss with respect to every
/// trainable parameter in the cached range.
pub fn backward(model: &MlpModel, acts: &Activations, targets: ArrayView2<f64>) -> Result<Gradients> {
    if acts.layers.is_empty() || acts.start + acts.layers.len() != model.layers.len() {
        return Err(Error::InvalidArgument("activations do not cover the network".into()));
    }
    let out = acts.output();
    if out.dim() != targets.dim() {
        return Err(Error::InvalidArgument(format!(
            "target shape {:?} vs output shape {:?}",
            targets.dim(),
            out.dim()
        )));
    }
    let n = out.nrows() as f64;
    let mut grads: Vec<Option<LayerGrads>> = vec![None; model.layers.len()];
    // softmax + categorical CE and sigmoid + binary CE share this form
    let mut dz = (out - &targets) / n;
    let first_trainable = model.layers[acts.start..]
        .iter()
        .position(|l| l.spec.trainable)
        .map(|p| p + acts.start);

    for idx in (acts.start..model.layers.len()).rev() {
        let layer = &model.layers[idx];
        let cache = &acts.layers[idx - acts.start];
        let is_output = idx + 1 == model.layers.len();
        if !is_output {
            // dz currently holds dL/d(output of this layer)
            let mut d = dz;
            if let Some(mask) = &cache.mask {
                d *= mask;
            }
            if layer.spec.l2_output {
                d = l2_backward(&cache.activated, &cache.z, &d);
            }
            if layer.spec.activation == Activation::Relu {
                // activated > 0 exactly where the pre-activation was positive
                d.zip_mut_with(&cache.activated, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            dz = d;
        }

        let (dz_affine, bn_grads) = match (&layer.bn, &cache.bn) {
            (Some(bn), Some((xhat, inv_std))) => {
                let dgamma = (&dz * xhat).sum_axis(Axis(0));
                let dbeta = dz.sum_axis(Axis(0));
                let dxhat = &dz * &bn.gamma;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                let dz_in = (&dxhat * n - &sum_dxhat - xhat * &sum_dxhat_xhat) * inv_std / n;
                (dz_in, Some((dgamma, dbeta)))
            }
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "backward needs train-mode activations for batch-norm layers".into(),
                ))
            }
            _ => (dz, None),
        };

        if layer.spec.trainable {
            let (gamma, beta) = match bn_grads {
                Some((g, b)) => (Some(g), Some(b)),
                None => (None, None),
            };
            grads[idx] = Some(LayerGrads {
                weights: dz_affine.t().dot(&cache.input),
                bias: dz_affine.sum_axis(Axis(0)),
                gamma,
                beta,
            });
        }
        match first_trainable {
            Some(f) if idx > f => dz = dz_affine.dot(&layer.weights),
            _ => break,
        }
    }
    Ok(Gradients { layers: grads })
}

/// Backward of row-wise `y = z / |z|`.
fn l2_backward(y: &Array2<f64>, z: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(dy.dim());
    for i in 0..y.nrows() {
        let norm = z.row(i).dot(&z.row(i)).sqrt();
        if norm == 0.0 {
            continue;
        }
        let proj = y.row(i).dot(&dy.row(i));
        let row = (&dy.row(i) - &(&y.row(i) * proj)) / norm;
        out.row_mut(i).assign(&row);
    }
    out
}

/// Folds the batch statistics of a train-mode pass into the running
/// statistics used at inference.
pub fn update_running_stats(model: &mut MlpModel, acts: &Activations) {
    for (layer, cache) in model.layers[acts.start..].iter_mut().zip(&acts.layers) {
        if let (Some(bn), Some((mean, var))) = (layer.bn.as_mut(), &cache.batch_stats) {
            bn.update(mean, var);
        }
    }
}

#[cfg(test)]
mod tests;
