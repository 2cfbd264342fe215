//! Local training on one node.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{combined_loss_and_grad, ContrastiveSettings, LocalBuffer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor_nn::{param_delta, sgd_step, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    /// Local iterations per round; one minibatch step each.
    pub local_iters: usize,
    pub eta_l: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: usize,
    shard: Dataset,
    pub buffer: LocalBuffer,
    /// Root of the node's training stream; each round derives its own generator from it.
    train_seed: u64,
    pub last_round: Option<usize>,
    pub rounds_trained: usize,
}

impl NodeState {
    pub fn new(id: usize, shard: Dataset, buffer_capacity: usize, train_seed: u64) -> Self {
        Self {
            id,
            shard,
            buffer: LocalBuffer::new(buffer_capacity),
            train_seed,
            last_round: None,
            rounds_trained: 0,
        }
    }

    pub fn shard(&self) -> &Dataset {
        &self.shard
    }

    /// Runs `local_iters` SGD steps from `global` and returns the flat update.
    ///
    /// Minibatches follow a per-round shuffled order without replacement,
    /// reshuffling whenever the order runs out. The model used at each
    /// iteration is pushed into the buffer after its step.
    pub fn local_train(
        &mut self,
        global: &ModelParams,
        cfg: &LocalTrainConfig,
        round: usize,
    ) -> Result<Vec<f64>> {
        if self.shard.is_empty() {
            return Err(Error::EmptyShard(self.id));
        }
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let settings = ContrastiveSettings {
            tau: cfg.tau,
            lambda: cfg.lambda,
        };
        let mu_reference = self.buffer.newest().cloned();
        let mut rng = stream_rng(self.train_seed, Stream::Training, self.id as u64, round as u64);
        let n = self.shard.len();
        let batch = cfg.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;

        let mut w = global.clone();
        for _ in 0..cfg.local_iters {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let mb = self.shard.minibatch(&order[cursor..cursor + batch])?;
            cursor += batch;
            let grad = combined_loss_and_grad(
                &w,
                &mb,
                global,
                &self.buffer,
                settings,
                mu_reference.as_ref(),
            )?;
            let next = sgd_step(&w, &grad, cfg.eta_l)?;
            self.buffer.push(std::mem::replace(&mut w, next));
        }
        self.last_round = Some(round);
        self.rounds_trained += 1;
        param_delta(&w, global)
    }
}

/// Update reported by a node that sat the round out.
pub fn nonparticipant_update(dim: usize) -> Vec<f64> {
    vec![0.0; dim]
}
