//! Desk-scale classifiers trained with mini-batch SGD and momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::ToyDataset;
use super::TrainerError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    SoftmaxLinear,
    Mlp {
        hidden: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub arch: Arch,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, momentum: 0.9, batch_size: 128, arch: Arch::SoftmaxLinear, seed: 0 }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainerError::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainerError::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::InvalidConfig("batch_size must be positive".into()));
        }
        if matches!(self.arch, Arch::Mlp { hidden: 0 }) {
            return Err(TrainerError::InvalidConfig("mlp hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate for `epoch` of a round of `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

pub trait Classifier {
    fn predict(&self, x: &[f64]) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }

    /// Accumulates parameter gradients for upstream gradient `g` at input
    /// `x`; writes the input gradient to `gx` when asked.
    fn backward(&self, x: &[f64], g: &[f64], grad: &mut Dense, gx: Option<&mut Vec<f64>>) {
        for (o, &go) in g.iter().enumerate() {
            grad.bias[o] += go;
            let row = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            for (r, v) in row.iter_mut().zip(x) {
                *r += go * v;
            }
        }
        if let Some(gx) = gx {
            gx.clear();
            gx.resize(self.inputs, 0.0);
            for (o, &go) in g.iter().enumerate() {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                for (acc, w) in gx.iter_mut().zip(row) {
                    *acc += go * w;
                }
            }
        }
    }
}

/// Softmax classifier, optionally with one ReLU hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Arch,
    pub dim: usize,
    pub n_classes: usize,
    layers: Vec<Dense>,
    #[serde(skip)]
    velocity: Option<Vec<Dense>>,
}

impl Model {
    pub fn new(arch: Arch, dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match arch {
            Arch::SoftmaxLinear => vec![Dense::new(dim, n_classes, 0.01, &mut rng)],
            Arch::Mlp { hidden } => vec![
                Dense::new(dim, hidden, (2.0 / dim as f64).sqrt(), &mut rng),
                Dense::new(hidden, n_classes, (1.0 / hidden as f64).sqrt(), &mut rng),
            ],
        };
        Self { arch, dim, n_classes, layers, velocity: None }
    }

    /// Flattened parameters, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    /// Drops the momentum buffers.
    pub fn reset_momentum(&mut self) {
        self.velocity = None;
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_all(x, &mut acts);
        acts.pop().unwrap_or_default()
    }

    /// Activations after every layer; hidden layers are post-ReLU.
    fn forward_all(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(acts.last().map_or(x, |a| a.as_slice()), &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
    }

    fn check_shape(&self, ds: &ToyDataset) -> Result<(), TrainerError> {
        if ds.dim() != self.dim || ds.n_classes != self.n_classes {
            return Err(TrainerError::ShapeMismatch {
                model: (self.dim, self.n_classes),
                data: (ds.dim(), ds.n_classes),
            });
        }
        Ok(())
    }
}

impl Classifier for Model {
    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of `logits` against `label`, and the softmax in `probs`.
fn softmax_xent(logits: &[f64], label: usize, probs: &mut Vec<f64>) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    probs.clear();
    probs.extend(logits.iter().map(|z| (z - max).exp()));
    let norm: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= norm);
    norm.ln() + max - logits[label]
}

/// Per-row outputs of one epoch, aligned with the `rows` passed in.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutput {
    pub predictions: Vec<usize>,
    pub losses: Vec<f64>,
}

/// One pass over `rows` in a shuffled order determined by `shuffle_seed`.
///
/// Each batch is forward-passed first; its argmax predictions and
/// cross-entropy losses against the observed labels are recorded, and only
/// then is the momentum-SGD step applied.
pub fn train_epoch(
    model: &mut Model,
    ds: &ToyDataset,
    rows: &[usize],
    config: &TrainerConfig,
    lr: f64,
    shuffle_seed: u64,
) -> Result<EpochOutput, TrainerError> {
    model.check_shape(ds)?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

    let mut predictions = vec![0; rows.len()];
    let mut losses = vec![0.0; rows.len()];
    let mut grads: Vec<Dense> = model.layers.iter().map(Dense::zeros_like).collect();
    let mut acts = Vec::new();
    let mut probs = Vec::new();
    let mut upstream = Vec::new();
    let mut down = Vec::new();

    for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
        grads.iter_mut().for_each(|g| {
            g.weights.iter_mut().for_each(|v| *v = 0.0);
            g.bias.iter_mut().for_each(|v| *v = 0.0);
        });
        for &slot in batch {
            let row = rows[slot];
            let x = &ds.features[row];
            let label = ds.observed_labels[row];
            model.forward_all(x, &mut acts);
            let logits = acts.last().expect("at least one layer");
            let loss = softmax_xent(logits, label, &mut probs);
            if !loss.is_finite() {
                return Err(TrainerError::NonFiniteLoss { batch: batch_no, row: ds.ids[row].to_string(), loss });
            }
            predictions[slot] = argmax(logits);
            losses[slot] = loss;

            // d loss / d logits = softmax - onehot.
            upstream.clear();
            upstream.extend_from_slice(&probs);
            upstream[label] -= 1.0;
            for k in (0..model.layers.len()).rev() {
                let input = if k == 0 { x.as_slice() } else { acts[k - 1].as_slice() };
                let need_down = k > 0;
                model.layers[k].backward(input, &upstream, &mut grads[k], need_down.then_some(&mut down));
                if need_down {
                    // ReLU gate of the layer below.
                    for (g, a) in down.iter_mut().zip(&acts[k - 1]) {
                        if *a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    std::mem::swap(&mut upstream, &mut down);
                }
            }
        }

        let scale = 1.0 / batch.len() as f64;
        let velocity = model.velocity.get_or_insert_with(|| model.layers.iter().map(Dense::zeros_like).collect());
        for ((layer, vel), grad) in model.layers.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
            for ((p, v), g) in layer
                .weights
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .zip(vel.weights.iter_mut().chain(vel.bias.iter_mut()))
                .zip(grad.weights.iter().chain(&grad.bias))
            {
                *v = config.momentum * *v + g * scale;
                *p -= lr * *v;
            }
        }
    }
    Ok(EpochOutput { predictions, losses })
}
