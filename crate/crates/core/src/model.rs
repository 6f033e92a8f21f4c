//! Fully connected ReLU networks with a softmax cross-entropy head and
//! hand-derived gradients.
//!
//! Parameters are flattened layer by layer; within a layer the weight matrix
//! comes first (row-major, one row per output unit) followed by the bias.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::grad::GradientVector;
use crate::seed::{stream_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("a model needs at least an input and an output layer, got dims {0:?}")]
    TooFewLayers(Vec<usize>),
    #[error("layer widths must be positive, got dims {0:?}")]
    EmptyLayer(Vec<usize>),
    #[error("model expects {expected} parameters, got {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("batch feature width {found} does not match model input {expected}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("label {label} of sample {sample} is out of range for {classes} classes")]
    LabelOutOfRange { sample: usize, label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {what} encountered")]
    NonFinite { what: &'static str },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Borrowed rows of a dataset: `labels.len()` samples of `inputs.len() / labels.len()` features.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub inputs: &'a [f64],
    pub labels: &'a [usize],
}

impl<'a> BatchView<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize, feature_dim: usize) -> &'a [f64] {
        &self.inputs[i * feature_dim..(i + 1) * feature_dim]
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }
}

pub(crate) fn layer_slots(dims: &[usize]) -> Vec<LayerSlot> {
    let mut offset = 0;
    dims.windows(2)
        .map(|w| {
            let slot = LayerSlot {
                fan_in: w[0],
                fan_out: w[1],
                weight_offset: offset,
                bias_offset: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            slot
        })
        .collect()
}

/// `Σ (in·out + out)` over consecutive layer pairs.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(ModelError::TooFewLayers(dims.to_vec()));
    }
    if dims.contains(&0) {
        return Err(ModelError::EmptyLayer(dims.to_vec()));
    }
    Ok(())
}

/// Per-sample forward state kept for backpropagation.
pub(crate) struct ForwardTrace {
    /// `activations[0]` is the input, `activations[l]` the output of layer `l`
    /// (post-ReLU for hidden layers, softmax probabilities for the last).
    pub activations: Vec<Vec<f64>>,
    /// Pre-activation of the output layer.
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<f64>,
}

impl MlpModel {
    pub fn new(layer_dims: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        check_dims(&layer_dims)?;
        let expected = param_count(&layer_dims);
        if weights.len() != expected {
            return Err(ModelError::ParamCount { expected, found: weights.len() });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::NonFinite { what: "weight" });
        }
        Ok(Self { layer_dims, weights })
    }

    pub fn zeros(layer_dims: Vec<usize>) -> Result<Self> {
        check_dims(&layer_dims)?;
        let d = param_count(&layer_dims);
        Ok(Self { layer_dims, weights: vec![0.0; d] })
    }

    /// He-normal weights, zero biases, drawn from a seeded stream.
    pub fn init(layer_dims: Vec<usize>, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        let mut rng = stream_rng(seed, Stream::ModelInit, &[]);
        for slot in layer_slots(&model.layer_dims) {
            let std = (2.0 / slot.fan_in as f64).sqrt();
            for w in &mut model.weights[slot.weight_range()] {
                let z: f64 = rng.sample(StandardNormal);
                *w = z * std;
            }
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(ModelError::ParamCount { expected: self.weights.len(), found: weights.len() });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::NonFinite { what: "weight" });
        }
        self.weights = weights;
        Ok(())
    }

    pub(crate) fn slots(&self) -> Vec<LayerSlot> {
        layer_slots(&self.layer_dims)
    }

    fn check_batch(&self, batch: &BatchView<'_>) -> Result<()> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let width = batch.inputs.len() / batch.len();
        if width != self.input_dim() || width * batch.len() != batch.inputs.len() {
            return Err(ModelError::FeatureMismatch { expected: self.input_dim(), found: width });
        }
        let classes = self.classes();
        if let Some((sample, &label)) = batch.labels.iter().enumerate().find(|(_, l)| **l >= classes) {
            return Err(ModelError::LabelOutOfRange { sample, label, classes });
        }
        Ok(())
    }

    pub(crate) fn forward_one(&self, x: &[f64]) -> ForwardTrace {
        let slots = self.slots();
        let mut activations = Vec::with_capacity(slots.len() + 1);
        activations.push(x.to_vec());
        let mut logits = Vec::new();
        for (l, slot) in slots.iter().enumerate() {
            let input = &activations[l];
            let w = &self.weights[slot.weight_range()];
            let b = &self.weights[slot.bias_range()];
            let mut z: Vec<f64> = (0..slot.fan_out)
                .map(|j| {
                    let row = &w[j * slot.fan_in..(j + 1) * slot.fan_in];
                    b[j] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            if l + 1 == slots.len() {
                logits = z.clone();
                softmax_in_place(&mut z);
            } else {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(z);
        }
        ForwardTrace { activations, logits }
    }

    /// Class probabilities for every row, `n × classes` row-major.
    pub fn predict_proba(&self, batch: BatchView<'_>) -> Result<Vec<f64>> {
        self.check_batch(&batch)?;
        let d = self.input_dim();
        Ok((0..batch.len())
            .flat_map(|i| self.forward_one(batch.sample(i, d)).activations.pop().expect("output layer"))
            .collect())
    }

    /// Fraction of rows whose arg-max class equals the label.
    pub fn accuracy(&self, batch: BatchView<'_>) -> Result<f64> {
        self.check_batch(&batch)?;
        let d = self.input_dim();
        let correct: usize = (0..batch.len())
            .into_par_iter()
            .filter(|&i| {
                let trace = self.forward_one(batch.sample(i, d));
                argmax(&trace.logits) == batch.labels[i]
            })
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }

    /// Mean cross-entropy over the batch and its exact gradient.
    pub fn forward_backward(&self, batch: BatchView<'_>) -> Result<(f64, GradientVector)> {
        self.check_batch(&batch)?;
        let slots = self.slots();
        let d = self.input_dim();
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let trace = self.forward_one(batch.sample(i, d));
            let label = batch.labels[i];
            loss += log_sum_exp(&trace.logits) - trace.logits[label];

            // δ at the output: p − onehot(y), averaged over the batch.
            let mut delta: Vec<f64> = trace.activations[slots.len()].iter().map(|p| p / n).collect();
            delta[label] -= 1.0 / n;
            for (l, slot) in slots.iter().enumerate().rev() {
                let input = &trace.activations[l];
                let gw = &mut grad[slot.weight_range()];
                for (j, &dj) in delta.iter().enumerate() {
                    if dj != 0.0 {
                        let row = &mut gw[j * slot.fan_in..(j + 1) * slot.fan_in];
                        row.iter_mut().zip(input).for_each(|(g, a)| *g += dj * a);
                    }
                }
                grad[slot.bias_range()].iter_mut().zip(&delta).for_each(|(g, dj)| *g += dj);
                if l > 0 {
                    let w = &self.weights[slot.weight_range()];
                    let mut prev = vec![0.0; slot.fan_in];
                    for (j, &dj) in delta.iter().enumerate() {
                        if dj != 0.0 {
                            let row = &w[j * slot.fan_in..(j + 1) * slot.fan_in];
                            prev.iter_mut().zip(row).for_each(|(p, wji)| *p += wji * dj);
                        }
                    }
                    // ReLU mask of the layer below
                    prev.iter_mut().zip(input).for_each(|(p, a)| {
                        if *a <= 0.0 {
                            *p = 0.0
                        }
                    });
                    delta = prev;
                }
            }
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite { what: "loss" });
        }
        let grad = GradientVector::new(grad).map_err(|_| ModelError::NonFinite { what: "gradient" })?;
        Ok((loss, grad))
    }
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
