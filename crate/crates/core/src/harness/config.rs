//! Experiment configuration: one flat key/value document.
//!
//! Learning rates are per step, rounds and iterations are counts, buffer
//! sizes are numbers of stored models, frequencies are per-round probabilities.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::LocalTrainConfig;
use crate::error::{Error, Result};
use crate::heterogeneity::FREQUENCY_FLOOR;
use crate::participation::{Pattern, DEFAULT_CYCLE, DEFAULT_P01};
use crate::server::{AggregationMode, Combiner, Cutoff};
use crate::tensor_nn::{Activation, Architecture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Contrastive local training, adaptive weights, historical smoothing.
    Pmfl,
    /// Without the contrastive term (`lambda = 0`, no local buffer).
    WoMct,
    /// Participant mean instead of adaptive weights.
    WoAwc,
    /// Without historical global smoothing.
    WoHgm,
    /// Plain local SGD, participant mean, no smoothing.
    UniformAverage,
    /// Plain local SGD, mean of every node's latest cached update.
    CachedUpdate,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Pmfl,
        Variant::WoMct,
        Variant::WoAwc,
        Variant::WoHgm,
        Variant::UniformAverage,
        Variant::CachedUpdate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pmfl => "pmfl",
            Variant::WoMct => "wo_mct",
            Variant::WoAwc => "wo_awc",
            Variant::WoHgm => "wo_hgm",
            Variant::UniformAverage => "uniform_average",
            Variant::CachedUpdate => "cached_update",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Bernoulli,
    Markovian,
    Cyclic,
    /// Every node in every round, ignoring frequencies.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSourceKind {
    Synthetic,
    Csv,
}

/// Full experiment description. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    /// Number of nodes K.
    pub num_nodes: usize,
    /// Number of rounds T.
    pub rounds: usize,
    /// Dirichlet concentration of the label skew.
    pub alpha: f64,
    /// Dirichlet concentration of the participation direction.
    pub beta: f64,
    /// Target mean participation probability per round.
    pub target_mean_frequency: f64,
    pub pattern: PatternKind,
    /// Markovian 0 -> 1 transition probability per round.
    pub markov_p01: f64,
    /// Cyclic pattern period, in rounds.
    pub cycle_length: u64,
    /// Local SGD steps per round (E).
    pub local_iters: usize,
    pub eta_l: f64,
    pub eta_g: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Local buffer size N, in models.
    pub local_buffer: usize,
    /// Global buffer size H, in models.
    pub global_buffer: usize,
    /// Cutoff interval C in rounds, or "inf".
    pub cutoff: Cutoff,
    pub batch_size: usize,
    pub encoder_dims: Vec<usize>,
    pub projection_dims: Vec<usize>,
    /// Hidden classifier widths; the class-count output layer is appended.
    pub classifier_hidden: Vec<usize>,
    pub activation: Activation,
    pub aggregation_mode: AggregationMode,
    pub variant: Variant,
    pub data_source: DataSourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    pub data_has_header: bool,
    pub data_standardize: bool,
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub train_fraction: f64,
    /// Distance of each class mean from the origin along its own axis.
    pub class_separation: f64,
    /// Per-feature standard deviation of the synthetic mixture.
    pub noise_std: f64,
    /// Evaluate every this many rounds; the last round is always evaluated.
    pub eval_every: usize,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Small profile: 30 nodes, 400 rounds, 10-class synthetic mixture.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            num_nodes: 30,
            rounds: 400,
            alpha: 0.1,
            beta: 0.1,
            target_mean_frequency: 0.1,
            pattern: PatternKind::Bernoulli,
            markov_p01: DEFAULT_P01,
            cycle_length: DEFAULT_CYCLE,
            local_iters: 5,
            eta_l: 0.1,
            eta_g: 1.0,
            tau: 0.5,
            lambda: 0.5,
            local_buffer: 5,
            global_buffer: 3,
            cutoff: Cutoff::Finite(50),
            batch_size: 32,
            encoder_dims: vec![32, 32],
            projection_dims: vec![16],
            classifier_hidden: vec![],
            activation: Activation::Relu,
            aggregation_mode: AggregationMode::Corrected,
            variant: Variant::Pmfl,
            data_source: DataSourceKind::Synthetic,
            data_path: None,
            data_has_header: false,
            data_standardize: false,
            num_classes: 10,
            input_dim: 20,
            samples_per_class: 200,
            train_fraction: 0.8,
            class_separation: 1.0,
            noise_std: 0.5,
            eval_every: 10,
            checkpoint_every: 0,
        }
    }

    /// Full-size hyper-parameters: 250 nodes, 10000 rounds. Expressible, not meant for desk runs.
    pub fn full_scale() -> Self {
        Self {
            num_nodes: 250,
            rounds: 10_000,
            samples_per_class: 6000,
            ..Self::desk()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| toml_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Whether `key` names a configuration field.
    pub fn has_key(&self, key: &str) -> bool {
        key == "data_path"
            || toml::Table::try_from(self)
                .expect("config always serializes")
                .contains_key(key)
    }

    /// Sets `key` from its textual value (TOML syntax; bare words are strings).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.has_key(key) {
            return Err(Error::config(key, "unknown key"));
        }
        let mut table = toml::Table::try_from(&*self).expect("config always serializes");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            // bare inf/nan would parse as floats; keep them textual (e.g. cutoff = "inf")
            .filter(|v| v.as_float().is_none_or(f64::is_finite))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let updated: Self = toml::Table::try_into(table).map_err(|e| toml_error(&e))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        }
        fn at_least_one(field: &str, v: usize) -> Result<()> {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::config(field, "must be at least 1"))
            }
        }
        at_least_one("num_nodes", self.num_nodes)?;
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        if !(self.target_mean_frequency > FREQUENCY_FLOOR && self.target_mean_frequency <= 1.0) {
            return Err(Error::config(
                "target_mean_frequency",
                format!("must lie in ({FREQUENCY_FLOOR}, 1]"),
            ));
        }
        if !(self.markov_p01 > 0.0 && self.markov_p01 <= 1.0) {
            return Err(Error::config("markov_p01", "must lie in (0, 1]"));
        }
        if self.cycle_length == 0 {
            return Err(Error::config("cycle_length", "must be at least 1"));
        }
        positive("eta_l", self.eta_l)?;
        positive("eta_g", self.eta_g)?;
        positive("tau", self.tau)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        at_least_one("batch_size", self.batch_size)?;
        for (field, dims) in [
            ("encoder_dims", &self.encoder_dims),
            ("projection_dims", &self.projection_dims),
        ] {
            if dims.is_empty() {
                return Err(Error::config(field, "needs at least one layer"));
            }
        }
        for (field, dims) in [
            ("encoder_dims", &self.encoder_dims),
            ("projection_dims", &self.projection_dims),
            ("classifier_hidden", &self.classifier_hidden),
        ] {
            if dims.contains(&0) {
                return Err(Error::config(field, "layer widths must be positive"));
            }
        }
        if self.rounds > 0 && self.rounds < 2 && self.effective().global_buffer > 1 {
            return Err(Error::config(
                "rounds",
                "smoothing with historical global models (global_buffer > 1) needs at least 2 rounds",
            ));
        }
        at_least_one("num_classes", self.num_classes)?;
        at_least_one("input_dim", self.input_dim)?;
        at_least_one("eval_every", self.eval_every)?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1)"));
        }
        match self.data_source {
            DataSourceKind::Synthetic => {
                at_least_one("samples_per_class", self.samples_per_class)?;
                if self.input_dim < self.num_classes {
                    return Err(Error::config(
                        "input_dim",
                        "synthetic class means need input_dim >= num_classes",
                    ));
                }
                if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
                    return Err(Error::config("noise_std", "must be non-negative"));
                }
                if !self.class_separation.is_finite() {
                    return Err(Error::config("class_separation", "must be finite"));
                }
            }
            DataSourceKind::Csv => {
                if self.data_path.is_none() {
                    return Err(Error::config("data_path", "required when data_source = \"csv\""));
                }
            }
        }
        Ok(())
    }

    /// `None` for full participation.
    pub fn participation_pattern(&self) -> Option<Pattern> {
        match self.pattern {
            PatternKind::Bernoulli => Some(Pattern::Bernoulli),
            PatternKind::Markovian => Some(Pattern::Markovian { p01: self.markov_p01 }),
            PatternKind::Cyclic => Some(Pattern::Cyclic {
                cycle: self.cycle_length,
            }),
            PatternKind::Full => None,
        }
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        let mut classifier = self.classifier_hidden.clone();
        classifier.push(num_classes);
        Architecture {
            input_dim,
            encoder: self.encoder_dims.clone(),
            projection: self.projection_dims.clone(),
            classifier,
            activation: self.activation,
        }
    }

    /// Settings after applying the variant's ablations.
    pub fn effective(&self) -> EffectiveSettings {
        let adaptive = Combiner::Adaptive {
            mode: self.aggregation_mode,
        };
        let base = EffectiveSettings {
            lambda: self.lambda,
            local_buffer: self.local_buffer,
            global_buffer: self.global_buffer,
            combiner: adaptive,
        };
        let plain = EffectiveSettings {
            lambda: 0.0,
            local_buffer: 0,
            global_buffer: 0,
            ..base.clone()
        };
        match self.variant {
            Variant::Pmfl => base,
            Variant::WoMct => EffectiveSettings {
                lambda: 0.0,
                local_buffer: 0,
                ..base
            },
            Variant::WoAwc => EffectiveSettings {
                combiner: Combiner::ParticipantMean,
                ..base
            },
            Variant::WoHgm => EffectiveSettings {
                global_buffer: 0,
                ..base
            },
            Variant::UniformAverage => EffectiveSettings {
                combiner: Combiner::ParticipantMean,
                ..plain
            },
            Variant::CachedUpdate => EffectiveSettings {
                combiner: Combiner::CachedUpdate { cache: Vec::new() },
                ..plain
            },
        }
    }

    pub fn local_train_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            local_iters: self.local_iters,
            eta_l: self.eta_l,
            batch_size: self.batch_size,
            tau: self.tau,
            lambda: self.effective().lambda,
        }
    }
}

/// Variant-resolved training and aggregation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSettings {
    pub lambda: f64,
    pub local_buffer: usize,
    pub global_buffer: usize,
    pub combiner: Combiner,
}

fn toml_error(e: &toml::de::Error) -> Error {
    let message = e.message().to_string();
    // unknown-field messages name the key; surface it as the field path
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string());
    Error::config(field, message)
}
