//! Dense feedforward network split into encoder, projection and classifier
//! partitions, with hand-written reverse-mode gradients.
//!
//! All parameters of a model live in one contiguous `Vec<f64>`. Each layer
//! owns a weight block (`outputs x inputs`, row-major) followed by its bias,
//! and layers are laid out encoder first, then projection, then classifier.
//! Flattening is therefore free and the three partitions are contiguous,
//! disjoint index ranges.
//!
//! Every layer except the final classifier layer is followed by the
//! configured activation. The representation used by the contrastive term is
//! the (activated) output of the last projection layer.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Minibatch;
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Encoder,
    Projection,
    Classifier,
}

impl Partition {
    pub const ALL: [Partition; 3] = [
        Partition::Encoder,
        Partition::Projection,
        Partition::Classifier,
    ];

    fn index(self) -> usize {
        match self {
            Partition::Encoder => 0,
            Partition::Projection => 1,
            Partition::Classifier => 2,
        }
    }
}

/// Layer widths of each partition. The last classifier width is the number of classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder: Vec<usize>,
    pub projection: Vec<usize>,
    pub classifier: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::shape("input_dim must be positive"));
        }
        for (name, dims) in [
            ("encoder", &self.encoder),
            ("projection", &self.projection),
            ("classifier", &self.classifier),
        ] {
            if dims.is_empty() {
                return Err(Error::shape(format!("{name} needs at least one layer")));
            }
            if dims.contains(&0) {
                return Err(Error::shape(format!("{name} has a zero-width layer")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        *self.classifier.last().expect("validated architecture")
    }

    pub fn representation_dim(&self) -> usize {
        *self.projection.last().expect("validated architecture")
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerSlot {
    fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }
}

#[derive(Debug)]
struct Layout {
    arch: Architecture,
    layers: Vec<LayerSlot>,
    ranges: [Range<usize>; 3],
    /// Index of the first classifier layer; its input is the representation.
    first_classifier: usize,
    len: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut ranges: [Range<usize>; 3] = [0..0, 0..0, 0..0];
        let mut width = arch.input_dim;
        let mut offset = 0;
        for (part, dims) in [
            (Partition::Encoder, &arch.encoder),
            (Partition::Projection, &arch.projection),
            (Partition::Classifier, &arch.classifier),
        ] {
            let start = offset;
            for &outputs in dims {
                layers.push(LayerSlot {
                    inputs: width,
                    outputs,
                    offset,
                });
                offset += width * outputs + outputs;
                width = outputs;
            }
            ranges[part.index()] = start..offset;
        }
        Ok(Self {
            arch: arch.clone(),
            first_classifier: arch.encoder.len() + arch.projection.len(),
            layers,
            ranges,
            len: offset,
        })
    }
}

/// Parameters of one model instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "ParamsRepr", try_from = "ParamsRepr")]
pub struct ModelParams {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    architecture: Architecture,
    values: Vec<f64>,
}

impl From<ModelParams> for ParamsRepr {
    fn from(p: ModelParams) -> Self {
        ParamsRepr {
            architecture: p.layout.arch.clone(),
            values: p.values,
        }
    }
}

impl TryFrom<ParamsRepr> for ModelParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        ModelParams::from_flat(&r.architecture, r.values)
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.layout.arch == other.layout.arch && self.values == other.values
    }
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let layout = Layout::new(arch)?;
        let values = vec![0.0; layout.len];
        Ok(Self {
            layout: Arc::new(layout),
            values,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_uniform<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let layout = Arc::clone(&params.layout);
        for slot in &layout.layers {
            let s = (6.0 / (slot.inputs + slot.outputs) as f64).sqrt();
            for w in &mut params.values[slot.weights()] {
                *w = rng.random_range(-s..=s);
            }
        }
        Ok(params)
    }

    pub fn from_flat(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(arch)?;
        if values.len() != layout.len {
            return Err(Error::shape(format!(
                "flat vector has {} entries, architecture needs {}",
                values.len(),
                layout.len
            )));
        }
        Ok(Self {
            layout: Arc::new(layout),
            values,
        })
    }

    /// A model with the same architecture and the given values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(format!(
                "flat vector has {} entries, model has {}",
                values.len(),
                self.values.len()
            )));
        }
        Ok(Self {
            layout: Arc::clone(&self.layout),
            values,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.layout.arch
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn partition_range(&self, part: Partition) -> Range<usize> {
        self.layout.ranges[part.index()].clone()
    }

    pub fn num_layers(&self) -> usize {
        self.layout.layers.len()
    }

    /// `(inputs, outputs)` for every layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layout
            .layers
            .iter()
            .map(|l| (l.inputs, l.outputs))
            .collect()
    }

    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].weights()]
    }

    pub fn layer_bias(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].bias()]
    }

    pub fn layer_weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout.layers[layer].weights();
        &mut self.values[r]
    }

    pub fn layer_bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout.layers[layer].bias();
        &mut self.values[r]
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout.arch == other.layout.arch
    }

    fn check_congruent(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape("models have different architectures"))
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.arch.input_dim {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.layout.arch.input_dim
            )));
        }
        Ok(())
    }
}

/// Gradient of a scalar loss with respect to every parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub grad: ModelParams,
}

/// Activations recorded during a forward pass. `acts[0]` is the input and
/// `acts[l + 1]` the output of layer `l`; the final entry holds the logits.
pub(crate) struct ForwardTrace {
    acts: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace is never empty")
    }

    pub(crate) fn representation(&self, params: &ModelParams) -> &[f64] {
        &self.acts[params.layout.first_classifier]
    }
}

fn dense(params: &ModelParams, layer: usize, input: &[f64]) -> Vec<f64> {
    let slot = params.layout.layers[layer];
    let w = &params.values[slot.weights()];
    let b = &params.values[slot.bias()];
    (0..slot.outputs)
        .map(|o| {
            let row = &w[o * slot.inputs..(o + 1) * slot.inputs];
            b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect()
}

fn activate(act: Activation, v: &mut [f64]) {
    if act == Activation::Relu {
        for x in v {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
}

fn run_layers(params: &ModelParams, x: &[f64], upto: usize, trace: bool) -> Vec<Vec<f64>> {
    let last = params.layout.layers.len() - 1;
    let act = params.layout.arch.activation;
    let mut acts = Vec::with_capacity(if trace { upto + 1 } else { 1 });
    let mut cur = x.to_vec();
    for layer in 0..upto {
        let mut next = dense(params, layer, &cur);
        if layer != last {
            activate(act, &mut next);
        }
        if trace {
            acts.push(std::mem::replace(&mut cur, next));
        } else {
            cur = next;
        }
    }
    acts.push(cur);
    acts
}

pub(crate) fn forward_trace(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace> {
    params.check_input(x)?;
    Ok(ForwardTrace {
        acts: run_layers(params, x, params.layout.layers.len(), true),
    })
}

/// Output of the projection partition for input `x`.
pub fn forward_representation(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_input(x)?;
    let mut acts = run_layers(params, x, params.layout.first_classifier, false);
    Ok(acts.pop().expect("one activation"))
}

/// Unnormalized class scores for input `x`.
pub fn forward_logits(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_input(x)?;
    let mut acts = run_layers(params, x, params.layout.layers.len(), false);
    Ok(acts.pop().expect("one activation"))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Cross-entropy of `logits` against `label` and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[label];
    let mut d: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    d[label] -= 1.0;
    (loss, d)
}

/// Accumulates into `grad` the parameter gradient given the upstream gradient at
/// the logits and, optionally, an extra upstream gradient at the representation.
pub(crate) fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    dlogits: &[f64],
    drep: Option<&[f64]>,
    grad: &mut [f64],
) {
    let layout = &params.layout;
    let relu = layout.arch.activation == Activation::Relu;
    let mut delta = dlogits.to_vec();
    for layer in (0..layout.layers.len()).rev() {
        let slot = layout.layers[layer];
        let input = &trace.acts[layer];
        let gw = &mut grad[slot.weights()];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut gw[o * slot.inputs..(o + 1) * slot.inputs];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        for (g, d) in grad[slot.bias()].iter_mut().zip(&delta) {
            *g += d;
        }
        if layer == 0 {
            break;
        }
        let w = &params.values[slot.weights()];
        let mut prev = vec![0.0; slot.inputs];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &w[o * slot.inputs..(o + 1) * slot.inputs];
            for (p, a) in prev.iter_mut().zip(row) {
                *p += d * a;
            }
        }
        if layer == layout.first_classifier {
            if let Some(extra) = drep {
                for (p, e) in prev.iter_mut().zip(extra) {
                    *p += e;
                }
            }
        }
        if relu {
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        delta = prev;
    }
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn cross_entropy_and_grad(params: &ModelParams, batch: &Minibatch) -> Result<Gradient> {
    check_batch(params, batch)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let trace = forward_trace(params, batch.row(i))?;
        let (l, mut d) = softmax_cross_entropy(trace.logits(), batch.label(i));
        loss += l;
        d.iter_mut().for_each(|v| *v *= scale);
        backward(params, &trace, &d, None, &mut grad);
    }
    Ok(Gradient {
        loss: loss * scale,
        grad: params.with_values(grad)?,
    })
}

pub(crate) fn check_batch(params: &ModelParams, batch: &Minibatch) -> Result<()> {
    let arch = params.architecture();
    if batch.input_dim() != arch.input_dim {
        return Err(Error::shape(format!(
            "batch width {} does not match model input {}",
            batch.input_dim(),
            arch.input_dim
        )));
    }
    if batch.num_classes() > arch.num_classes() {
        return Err(Error::invalid(format!(
            "batch labels span {} classes, model has {}",
            batch.num_classes(),
            arch.num_classes()
        )));
    }
    Ok(())
}

/// `params - eta * grad`.
pub fn sgd_step(params: &ModelParams, grad: &Gradient, eta: f64) -> Result<ModelParams> {
    params.check_congruent(&grad.grad)?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {eta}")));
    }
    let values = params
        .values
        .iter()
        .zip(&grad.grad.values)
        .map(|(p, g)| p - eta * g)
        .collect();
    params.with_values(values)
}

/// Flat `after - before`.
pub fn param_delta(after: &ModelParams, before: &ModelParams) -> Result<Vec<f64>> {
    after.check_congruent(before)?;
    Ok(after
        .values
        .iter()
        .zip(&before.values)
        .map(|(a, b)| a - b)
        .collect())
}
