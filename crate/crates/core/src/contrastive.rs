//! Model-contrastive loss over a buffer of historical local models.
//!
//! For every sample the current representation `z` is compared against the
//! global model's representation and against the representations produced by
//! each buffered historical model. Historical representations whose cosine
//! similarity to `z` reaches the threshold `mu` count as positives, the rest
//! as negatives, and the loss is
//! `-ln(pos / (pos + neg))` with `exp(sim / tau)` terms.
//!
//! Buffered and global representations are constants: gradients only flow
//! through the current model.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::Minibatch;
use crate::error::{Error, Result};
use crate::numeric::{dot, log_sum_exp, norm, TOLERANCES};
use crate::tensor_nn::{
    backward, check_batch, forward_representation, forward_trace, softmax_cross_entropy,
    Gradient, ModelParams,
};

static ZERO_NORM_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_zero_norm() {
    if !ZERO_NORM_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("zero-norm representation; cosine similarity taken as 0 (further occurrences not logged)");
    }
}

/// Fixed-capacity FIFO of model snapshots owned by one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalBuffer {
    capacity: usize,
    entries: VecDeque<ModelParams>,
}

impl LocalBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a snapshot, evicting the oldest once full. A zero-capacity buffer stays empty.
    pub fn push(&mut self, snapshot: ModelParams) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(snapshot);
    }

    pub fn newest(&self) -> Option<&ModelParams> {
        self.entries.back()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &ModelParams> {
        self.entries.iter()
    }
}

/// Everything the loss needs besides the current representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveContext {
    pub global_rep: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub mu: f64,
    pub tau: f64,
    pub lambda: f64,
}

/// Cosine similarity. A zero-norm argument yields 0 (logged once).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_unchecked(a, b))
}

fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na <= TOLERANCES.zero_norm || nb <= TOLERANCES.zero_norm {
        warn_zero_norm();
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Splits historical representations into `(positives, negatives)` by `sim >= mu`.
pub fn partition_samples(
    current_rep: &[f64],
    historical_reps: &[Vec<f64>],
    mu: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !mu.is_finite() {
        return Err(Error::invalid(format!("threshold mu must be finite, got {mu}")));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for rep in historical_reps {
        if cosine_similarity(current_rep, rep)? >= mu {
            positives.push(rep.clone());
        } else {
            negatives.push(rep.clone());
        }
    }
    Ok((positives, negatives))
}

/// `-ln(pos / (pos + neg))`.
pub fn contrastive_loss(current_rep: &[f64], ctx: &ContrastiveContext) -> Result<f64> {
    if ctx.negatives.is_empty() {
        return Ok(0.0);
    }
    let sim = |v: &Vec<f64>| cosine_similarity(current_rep, v).map(|s| s / ctx.tau);
    let mut pos = vec![sim(&ctx.global_rep)?];
    for p in &ctx.positives {
        pos.push(sim(p)?);
    }
    let mut all = pos.clone();
    for n in &ctx.negatives {
        all.push(sim(n)?);
    }
    Ok(log_sum_exp(&all) - log_sum_exp(&pos))
}

/// Gradient of `cos(z, v)` with respect to `z`, accumulated as `scale * d/dz` into `out`.
fn add_cosine_grad(z: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
    let (nz, nv) = (norm(z), norm(v));
    if nz <= TOLERANCES.zero_norm || nv <= TOLERANCES.zero_norm {
        return;
    }
    let cos = dot(z, v) / (nz * nv);
    for i in 0..z.len() {
        out[i] += scale * (v[i] / (nz * nv) - cos * z[i] / (nz * nz));
    }
}

/// Loss and its gradient w.r.t. `z`. `mu` thresholds the historical terms;
/// the global term is always positive.
pub(crate) fn loss_and_rep_grad(
    z: &[f64],
    global_rep: &[f64],
    historical: &[Vec<f64>],
    mu: f64,
    tau: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; z.len()];
    let sims: Vec<f64> = historical.iter().map(|h| cosine_unchecked(z, h)).collect();
    if sims.iter().all(|&s| s >= mu) {
        return (0.0, grad);
    }
    let global_sim = cosine_unchecked(z, global_rep);
    // logits: index 0 is the global term, then historical entries in buffer order
    let mut logits = Vec::with_capacity(historical.len() + 1);
    logits.push(global_sim / tau);
    logits.extend(sims.iter().map(|s| s / tau));
    let positive: Vec<bool> = std::iter::once(true)
        .chain(sims.iter().map(|&s| s >= mu))
        .collect();
    let pos_logits: Vec<f64> = logits
        .iter()
        .zip(&positive)
        .filter(|(_, &p)| p)
        .map(|(l, _)| *l)
        .collect();
    let lse_all = log_sum_exp(&logits);
    let lse_pos = log_sum_exp(&pos_logits);
    let loss = lse_all - lse_pos;

    for (j, &l) in logits.iter().enumerate() {
        let mut coeff = (l - lse_all).exp();
        if positive[j] {
            coeff -= (l - lse_pos).exp();
        }
        let target = if j == 0 { global_rep } else { &historical[j - 1] };
        add_cosine_grad(z, target, coeff / tau, &mut grad);
    }
    (loss, grad)
}

/// Threshold for one sample: similarity between the reference model's and the
/// global model's representations of `x`. Without a reference the global
/// model is its own reference and the threshold is 1.
pub fn compute_mu(
    reference: Option<&ModelParams>,
    global_params: &ModelParams,
    x: &[f64],
) -> Result<f64> {
    match reference {
        None => Ok(1.0),
        Some(r) => {
            let zr = forward_representation(r, x)?;
            let zg = forward_representation(global_params, x)?;
            cosine_similarity(&zr, &zg)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveSettings {
    pub tau: f64,
    pub lambda: f64,
}

/// Batch mean of `cross_entropy + lambda * contrastive` and its gradient.
///
/// `mu_reference` is the model whose representation sets the per-sample
/// threshold (see [`compute_mu`]). With `lambda == 0` the result is exactly
/// that of [`crate::tensor_nn::cross_entropy_and_grad`].
pub fn combined_loss_and_grad(
    params: &ModelParams,
    batch: &Minibatch,
    global_params: &ModelParams,
    buffer: &LocalBuffer,
    settings: ContrastiveSettings,
    mu_reference: Option<&ModelParams>,
) -> Result<Gradient> {
    check_batch(params, batch)?;
    if !(settings.tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {}", settings.tau)));
    }
    if !global_params.same_shape(params) || buffer.iter().any(|b| !b.same_shape(params)) {
        return Err(Error::shape("global or buffered model differs from the local model"));
    }
    let use_contrastive = settings.lambda != 0.0;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let x = batch.row(i);
        let trace = forward_trace(params, x)?;
        let (ce, mut dlogits) = softmax_cross_entropy(trace.logits(), batch.label(i));
        dlogits.iter_mut().for_each(|v| *v *= scale);
        if use_contrastive {
            let z = trace.representation(params);
            let global_rep = forward_representation(global_params, x)?;
            let historical = buffer
                .iter()
                .map(|m| forward_representation(m, x))
                .collect::<Result<Vec<_>>>()?;
            let mu = compute_mu(mu_reference, global_params, x)?;
            let (con, mut drep) = loss_and_rep_grad(z, &global_rep, &historical, mu, settings.tau);
            loss += ce + settings.lambda * con;
            drep.iter_mut().for_each(|v| *v *= settings.lambda * scale);
            backward(params, &trace, &dlogits, Some(&drep), &mut grad);
        } else {
            loss += ce;
            backward(params, &trace, &dlogits, None, &mut grad);
        }
    }
    Ok(Gradient {
        loss: loss * scale,
        grad: params.with_values(grad)?,
    })
}
