//! Server side of a round: participation-interval weights, weighted
//! aggregation of node updates, and smoothing with recent global models.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor_nn::ModelParams;

/// Maximum number of rounds a node may go unobserved before a synthetic
/// weight-update event fires. `Infinite` disables cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cutoff {
    Finite(u64),
    Infinite,
}

impl Cutoff {
    fn reached(self, q: u64) -> bool {
        matches!(self, Cutoff::Finite(c) if q == c)
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::Finite(c) => write!(f, "{c}"),
            Cutoff::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Cutoff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinite" | "none" => Ok(Cutoff::Infinite),
            other => match other.parse::<u64>() {
                Ok(c) if c >= 1 => Ok(Cutoff::Finite(c)),
                _ => Err(Error::invalid(format!(
                    "cutoff must be a positive integer or \"inf\", got {other:?}"
                ))),
            },
        }
    }
}

impl Serialize for Cutoff {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cutoff::Finite(c) => s.serialize_u64(*c),
            Cutoff::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Cutoff {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(c) if c >= 1 => Ok(Cutoff::Finite(c as u64)),
            Raw::Int(c) => Err(serde::de::Error::custom(format!(
                "cutoff must be at least 1, got {c}"
            ))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Per-node interval bookkeeping. `x[k]` is the running mean of the recorded
/// intervals of node `k`, meaningful once `r[k] > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorState {
    /// Rounds since the last weight-update event.
    q: Vec<u64>,
    /// Number of weight-update events so far.
    r: Vec<u64>,
    x: Vec<f64>,
    cutoff: Cutoff,
}

impl AggregatorState {
    pub fn new(num_nodes: usize, cutoff: Cutoff) -> Self {
        Self {
            q: vec![0; num_nodes],
            r: vec![0; num_nodes],
            x: vec![1.0; num_nodes],
            cutoff,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.x.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.x
    }

    pub fn event_counts(&self) -> &[u64] {
        &self.r
    }

    pub fn pending_intervals(&self) -> &[u64] {
        &self.q
    }

    /// Advances every node by one round. A node records its current interval
    /// when it participates or when the interval reaches the cutoff.
    pub fn update_weights(&mut self, indicators: &[bool]) -> Result<&[f64]> {
        if indicators.len() != self.x.len() {
            return Err(Error::shape(format!(
                "{} indicators for {} nodes",
                indicators.len(),
                self.x.len()
            )));
        }
        for (k, &active) in indicators.iter().enumerate() {
            self.q[k] += 1;
            if active || self.cutoff.reached(self.q[k]) {
                let interval = self.q[k] as f64;
                self.x[k] = if self.r[k] == 0 {
                    interval
                } else {
                    let r = self.r[k] as f64;
                    (r * self.x[k] + interval) / (r + 1.0)
                };
                self.r[k] += 1;
                self.q[k] = 0;
            }
        }
        Ok(&self.x)
    }
}

/// Most recent global models, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBuffer {
    capacity: usize,
    entries: VecDeque<ModelParams>,
}

impl GlobalBuffer {
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

    pub fn push(&mut self, model: ModelParams) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(model);
    }

    /// Buffered models older than the newest one (at most `capacity - 1`).
    pub fn historical(&self) -> impl Iterator<Item = &ModelParams> {
        let n = self.entries.len().saturating_sub(1);
        self.entries.iter().take(n)
    }
}

/// Mixing coefficient `1/2 - t / (2 (T - 1))`.
pub fn psi(round: usize, rounds: usize) -> Result<f64> {
    if rounds < 2 {
        return Err(Error::config(
            "rounds",
            "smoothing with historical global models needs at least 2 rounds",
        ));
    }
    Ok(0.5 - round as f64 / (2.0 * (rounds - 1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `W - eta_g * sum_k x_k d_k`, taking the weighted sum at face value.
    SubtractSum,
    /// `W + (eta_g / K) * sum_k x_k d_k`.
    Corrected,
}

/// `(1 - psi) * candidate + psi * mean(historical)`; the candidate passes
/// through unchanged when no historical model is available.
pub fn smooth_with_history(candidate: Vec<f64>, history: &GlobalBuffer, psi: f64) -> Vec<f64> {
    let hist: Vec<&ModelParams> = history.historical().collect();
    if hist.is_empty() {
        return candidate;
    }
    let coef = psi / hist.len() as f64;
    candidate
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let sum: f64 = hist.iter().map(|h| h.as_flat()[i]).sum();
            (1.0 - psi) * c + coef * sum
        })
        .collect()
}

fn check_updates(dim: usize, num_nodes: usize, updates: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
    for (&k, u) in updates {
        if k >= num_nodes {
            return Err(Error::shape(format!("update from unknown node {k}")));
        }
        if u.len() != dim {
            return Err(Error::shape(format!(
                "update from node {k} has {} entries, model has {dim}",
                u.len()
            )));
        }
    }
    Ok(())
}

fn apply(global: &[f64], sum: &[f64], coef: f64) -> Vec<f64> {
    global.iter().zip(sum).map(|(w, s)| w + coef * s).collect()
}

/// Global update with adaptive weights followed by historical smoothing.
///
/// `updates` holds the participants' flat updates; absent nodes contribute
/// nothing. Weights must already reflect round `round`.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    state: &AggregatorState,
    history: &GlobalBuffer,
    global: &ModelParams,
    updates: &BTreeMap<usize, Vec<f64>>,
    mode: AggregationMode,
    eta_g: f64,
    round: usize,
    rounds: usize,
) -> Result<ModelParams> {
    check_updates(global.len(), state.num_nodes(), updates)?;
    let mut sum = vec![0.0; global.len()];
    for (&k, u) in updates {
        let x = state.weights()[k];
        for (s, d) in sum.iter_mut().zip(u) {
            *s += x * d;
        }
    }
    let candidate = match mode {
        AggregationMode::Corrected => apply(global.as_flat(), &sum, eta_g / state.num_nodes() as f64),
        AggregationMode::SubtractSum => apply(global.as_flat(), &sum, -eta_g),
    };
    finish(candidate, history, global, round, rounds)
}

fn finish(
    candidate: Vec<f64>,
    history: &GlobalBuffer,
    global: &ModelParams,
    round: usize,
    rounds: usize,
) -> Result<ModelParams> {
    let values = if history.capacity() > 1 && history.len() > 1 {
        smooth_with_history(candidate, history, psi(round, rounds)?)
    } else {
        candidate
    };
    global.with_values(values)
}

/// How node updates are turned into the pre-smoothing candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Combiner {
    /// Interval-weighted sum.
    Adaptive { mode: AggregationMode },
    /// Plain mean over this round's participants.
    ParticipantMean,
    /// Mean over all nodes of each node's most recent update.
    CachedUpdate { cache: Vec<Option<Vec<f64>>> },
}

/// Baseline and ablation aggregators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    UniformAverage,
    CachedUpdate,
    /// Adaptive weights with smoothing disabled.
    AwcOnly,
}

/// Aggregation state carried across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Server {
    pub combiner: Combiner,
    pub weights: AggregatorState,
    pub history: GlobalBuffer,
    pub eta_g: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundAggregate {
    pub model: ModelParams,
    /// Mixing coefficient applied this round, if smoothing was active.
    pub psi: Option<f64>,
}

impl Server {
    pub fn new(
        combiner: Combiner,
        num_nodes: usize,
        cutoff: Cutoff,
        history_size: usize,
        eta_g: f64,
        rounds: usize,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::config("num_nodes", "must be positive"));
        }
        if history_size > 1 && rounds < 2 && rounds > 0 {
            return Err(Error::config(
                "rounds",
                "smoothing with historical global models needs at least 2 rounds",
            ));
        }
        let combiner = match combiner {
            Combiner::CachedUpdate { .. } => Combiner::CachedUpdate {
                cache: vec![None; num_nodes],
            },
            other => other,
        };
        Ok(Self {
            combiner,
            weights: AggregatorState::new(num_nodes, cutoff),
            history: GlobalBuffer::new(history_size),
            eta_g,
            rounds,
        })
    }

    pub fn baseline(kind: BaselineKind, num_nodes: usize, cutoff: Cutoff, eta_g: f64, rounds: usize) -> Result<Self> {
        let combiner = match kind {
            BaselineKind::UniformAverage => Combiner::ParticipantMean,
            BaselineKind::CachedUpdate => Combiner::CachedUpdate { cache: Vec::new() },
            BaselineKind::AwcOnly => Combiner::Adaptive {
                mode: AggregationMode::Corrected,
            },
        };
        Self::new(combiner, num_nodes, cutoff, 0, eta_g, rounds)
    }

    /// Must be called with the initial global model before the first round.
    pub fn record_global(&mut self, model: &ModelParams) {
        self.history.push(model.clone());
    }

    /// Updates weights from `indicators`, aggregates `updates` into the next
    /// global model and records it in the history buffer.
    pub fn aggregate_round(
        &mut self,
        round: usize,
        global: &ModelParams,
        indicators: &[bool],
        updates: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<RoundAggregate> {
        self.weights.update_weights(indicators)?;
        let num_nodes = self.weights.num_nodes();
        let model = match &mut self.combiner {
            Combiner::Adaptive { mode } => aggregate(
                &self.weights,
                &self.history,
                global,
                updates,
                *mode,
                self.eta_g,
                round,
                self.rounds,
            )?,
            Combiner::ParticipantMean => {
                check_updates(global.len(), num_nodes, updates)?;
                let candidate = if updates.is_empty() {
                    global.as_flat().to_vec()
                } else {
                    let mut sum = vec![0.0; global.len()];
                    for u in updates.values() {
                        for (s, d) in sum.iter_mut().zip(u) {
                            *s += d;
                        }
                    }
                    apply(global.as_flat(), &sum, self.eta_g / updates.len() as f64)
                };
                finish(candidate, &self.history, global, round, self.rounds)?
            }
            Combiner::CachedUpdate { cache } => {
                check_updates(global.len(), num_nodes, updates)?;
                for (&k, u) in updates {
                    cache[k] = Some(u.clone());
                }
                let mut sum = vec![0.0; global.len()];
                for u in cache.iter().flatten() {
                    for (s, d) in sum.iter_mut().zip(u) {
                        *s += d;
                    }
                }
                let candidate = apply(global.as_flat(), &sum, self.eta_g / num_nodes as f64);
                finish(candidate, &self.history, global, round, self.rounds)?
            }
        };
        let psi = if self.history.capacity() > 1 && self.history.len() > 1 {
            Some(psi(round, self.rounds)?)
        } else {
            None
        };
        self.history.push(model.clone());
        Ok(RoundAggregate { model, psi })
    }
}
