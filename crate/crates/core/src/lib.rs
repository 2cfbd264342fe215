//! Deterministic federated-learning simulator with model-contrastive local
//! training, participation-adaptive aggregation weights and smoothing over
//! historical global models.

pub mod client;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod harness;
pub mod heterogeneity;
pub mod metrics;
pub mod numeric;
pub mod participation;
pub mod rng;
pub mod server;
pub mod tensor_nn;

pub use client::{LocalTrainConfig, NodeState};
pub use data::{Dataset, Minibatch};
pub use error::{Error, Result};
pub use harness::config::{ExperimentConfig, Variant};
pub use server::{AggregationMode, Cutoff, Server};
pub use tensor_nn::{Architecture, ModelParams};
