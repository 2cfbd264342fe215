//! End-to-end simulation of one configuration, with checkpoint/resume and
//! output files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{LocalTrainConfig, NodeState};
use crate::contrastive::LocalBuffer;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heterogeneity::{assign_frequencies, dirichlet_partition, DataPartition, FrequencyAssignment};
use crate::metrics::{deviation, evaluate, node_cdf, round_to_round_std, top5_mean, Evaluation, RoundMetrics};
use crate::participation::ParticipationTraces;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::server::Server;
use crate::tensor_nn::{Architecture, ModelParams};

use super::config::{DataSourceKind, ExperimentConfig};
use super::dataset::{load_csv, split_train_test, synth_dataset, CsvOptions, MixtureSpec, SplitDataset};
use super::model_io::save_model;

/// Number of evaluated rounds used for the round-to-round accuracy spread.
pub const STABILITY_WINDOW: usize = 100;

const CHECKPOINT_FILE: &str = "checkpoint.json";
const CHECKPOINT_FORMAT: u32 = 1;

/// Seeds of every random stream, all derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSeeds {
    pub root: u64,
    pub data: u64,
    pub partition: u64,
    pub frequencies: u64,
    pub participation: u64,
    pub init: u64,
    pub training: u64,
}

impl StreamSeeds {
    pub fn from_root(root: u64) -> Self {
        let d = |s| derive_seed(root, s, 0, 0);
        Self {
            root,
            data: d(Stream::Data),
            partition: d(Stream::Partition),
            frequencies: d(Stream::Frequencies),
            participation: d(Stream::Participation),
            init: d(Stream::Init),
            training: d(Stream::Training),
        }
    }
}

/// Everything fixed before the first round.
#[derive(Debug, Clone)]
pub struct Setup {
    pub seeds: StreamSeeds,
    pub data: SplitDataset,
    pub partition: DataPartition,
    pub frequencies: FrequencyAssignment,
    pub traces: ParticipationTraces,
    pub architecture: Architecture,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seeds = StreamSeeds::from_root(cfg.seed);
        let data = load_data(cfg, seeds.data)?;
        let partition = dirichlet_partition(&data.train, cfg.num_nodes, cfg.alpha, seeds.partition)?;
        let frequencies = assign_frequencies(
            &partition.distributions,
            cfg.beta,
            cfg.target_mean_frequency,
            seeds.frequencies,
        )?;
        let traces = match cfg.participation_pattern() {
            Some(pattern) => ParticipationTraces::generate(
                pattern,
                &frequencies.frequencies,
                cfg.rounds,
                seeds.participation,
            )?,
            None => ParticipationTraces {
                rounds: vec![vec![true; cfg.num_nodes]; cfg.rounds],
            },
        };
        let architecture = cfg.architecture(data.train.input_dim(), data.train.num_classes());
        architecture.validate()?;
        Ok(Self {
            seeds,
            data,
            partition,
            frequencies,
            traces,
            architecture,
        })
    }

    pub fn initial_model(&self) -> Result<ModelParams> {
        ModelParams::init_uniform(&self.architecture, &mut stream_rng(self.seeds.init, Stream::Init, 0, 0))
    }

    pub fn shard(&self, node: usize) -> Dataset {
        self.data.train.subset(&self.partition.shards[node])
    }
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<SplitDataset> {
    match cfg.data_source {
        DataSourceKind::Synthetic => synth_dataset(
            &MixtureSpec {
                num_classes: cfg.num_classes,
                input_dim: cfg.input_dim,
                samples_per_class: cfg.samples_per_class,
                train_fraction: cfg.train_fraction,
                separation: cfg.class_separation,
                noise_std: cfg.noise_std,
            },
            seed,
        ),
        DataSourceKind::Csv => {
            let path = cfg
                .data_path
                .as_ref()
                .ok_or_else(|| Error::config("data_path", "required for csv data"))?;
            let all = load_csv(
                path,
                &CsvOptions {
                    has_header: cfg.data_has_header,
                    standardize: cfg.data_standardize,
                    num_classes: None,
                },
            )?;
            split_train_test(&all, cfg.train_fraction, seed)
        }
    }
}

/// Per-round record kept for every round, evaluated or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: usize,
    pub deviation: Option<f64>,
    pub psi: Option<f64>,
    /// Aggregation weights after this round's update.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecords {
    pub rounds: Vec<RoundRecord>,
    pub metrics: Vec<RoundMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub rounds: usize,
    pub num_nodes: usize,
    pub evaluated_rounds: usize,
    pub final_train_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub top5_train_accuracy: Option<f64>,
    pub top5_test_accuracy: Option<f64>,
    /// Mean deviation over rounds in the last quarter that had a nonzero update.
    pub mean_deviation_last_quarter: Option<f64>,
    /// Std of successive test-accuracy differences over the last evaluated rounds.
    pub test_accuracy_round_std: Option<f64>,
    pub mean_participants: f64,
    pub prefloor_mean_frequency: f64,
    pub realized_mean_frequency: f64,
    pub partition_redraws: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub setup: Setup,
    pub records: RunRecords,
    pub summary: RunSummary,
    pub final_model: ModelParams,
    /// Final model evaluated on each node's shard.
    pub node_evaluations: Vec<Evaluation>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for outputs and checkpoints; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Training threads; 0 lets the pool choose. Results do not depend on it.
    pub workers: usize,
    /// Continue from `out_dir/checkpoint.json` if present.
    pub resume: bool,
    /// Stop after this many rounds, leaving a checkpoint (for interruption tests).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeProgress {
    buffer: LocalBuffer,
    last_round: Option<usize>,
    rounds_trained: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: u32,
    config: ExperimentConfig,
    next_round: usize,
    global: ModelParams,
    server: Server,
    nodes: Vec<NodeProgress>,
    records: RunRecords,
}

struct Simulation {
    next_round: usize,
    global: ModelParams,
    server: Server,
    nodes: Vec<NodeState>,
    records: RunRecords,
}

impl Simulation {
    fn fresh(cfg: &ExperimentConfig, setup: &Setup) -> Result<Self> {
        let eff = cfg.effective();
        let global = setup.initial_model()?;
        let mut server = Server::new(
            eff.combiner,
            cfg.num_nodes,
            cfg.cutoff,
            eff.global_buffer,
            cfg.eta_g,
            cfg.rounds,
        )?;
        server.record_global(&global);
        let nodes = (0..cfg.num_nodes)
            .map(|k| NodeState::new(k, setup.shard(k), eff.local_buffer, setup.seeds.training))
            .collect();
        Ok(Self {
            next_round: 0,
            global,
            server,
            nodes,
            records: RunRecords::default(),
        })
    }

    fn restore(cfg: &ExperimentConfig, setup: &Setup, ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format {}", ck.format)));
        }
        if &ck.config != cfg {
            return Err(Error::invalid("checkpoint was written for a different configuration"));
        }
        if ck.nodes.len() != cfg.num_nodes {
            return Err(Error::invalid("checkpoint node count does not match"));
        }
        let mut sim = Self::fresh(cfg, setup)?;
        for (node, p) in sim.nodes.iter_mut().zip(ck.nodes) {
            node.buffer = p.buffer;
            node.last_round = p.last_round;
            node.rounds_trained = p.rounds_trained;
        }
        sim.next_round = ck.next_round;
        sim.global = ck.global;
        sim.server = ck.server;
        sim.records = ck.records;
        Ok(sim)
    }

    fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: cfg.clone(),
            next_round: self.next_round,
            global: self.global.clone(),
            server: self.server.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeProgress {
                    buffer: n.buffer.clone(),
                    last_round: n.last_round,
                    rounds_trained: n.rounds_trained,
                })
                .collect(),
            records: self.records.clone(),
        }
    }

    fn step(&mut self, cfg: &ExperimentConfig, setup: &Setup, train_cfg: &LocalTrainConfig) -> Result<()> {
        let t = self.next_round;
        let mut indicators = setup.traces.rounds[t].clone();
        let global = &self.global;
        let results: Vec<(usize, Result<Vec<f64>>)> = self
            .nodes
            .par_iter_mut()
            .enumerate()
            .filter(|(k, _)| indicators[*k])
            .map(|(k, node)| (k, node.local_train(global, train_cfg, t)))
            .collect();
        let mut updates = BTreeMap::new();
        for (k, r) in results {
            match r {
                Ok(u) => {
                    updates.insert(k, u);
                }
                Err(Error::EmptyShard(k)) => {
                    log::warn!("node {k} has no data; treated as absent in round {t}");
                    indicators[k] = false;
                }
                Err(e) => return Err(e),
            }
        }

        let nonzero: Vec<&[f64]> = updates
            .values()
            .filter(|u| u.iter().any(|v| *v != 0.0))
            .map(Vec::as_slice)
            .collect();
        let dev = if nonzero.is_empty() {
            None
        } else {
            Some(deviation(&nonzero)?)
        };

        let agg = self.server.aggregate_round(t, &self.global, &indicators, &updates)?;
        self.global = agg.model;
        self.records.rounds.push(RoundRecord {
            round: t,
            participants: updates.len(),
            deviation: dev,
            psi: agg.psi,
            weights: self.server.weights.weights().to_vec(),
        });
        if (t + 1).is_multiple_of(cfg.eval_every) || t + 1 == cfg.rounds {
            self.records.metrics.push(RoundMetrics {
                round: t,
                participants: updates.len(),
                deviation: dev,
                psi: agg.psi,
                train: evaluate(&self.global, &setup.data.train)?,
                test: evaluate(&self.global, &setup.data.test)?,
            });
        }
        self.next_round += 1;
        Ok(())
    }
}

fn checkpoint_path(opts: &RunOptions) -> Option<PathBuf> {
    opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE))
}

/// Runs `cfg` to completion (or to `stop_after`) and writes outputs when an
/// output directory is given. Returns `Ok(None)` if stopped early.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Option<RunOutput>> {
    let setup = Setup::new(cfg)?;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ck_path = checkpoint_path(opts);
    let mut sim = match &ck_path {
        Some(p) if opts.resume && p.exists() => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            log::info!("resuming from {}", p.display());
            Simulation::restore(cfg, &setup, serde_json::from_str(&text)?)?
        }
        _ => Simulation::fresh(cfg, &setup)?,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let train_cfg = cfg.local_train_config();
    pool.install(|| -> Result<()> {
        while sim.next_round < cfg.rounds {
            sim.step(cfg, &setup, &train_cfg)?;
            let done = sim.next_round;
            let stop = opts.stop_after == Some(done);
            let cadence = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if let Some(p) = &ck_path {
                if (stop || cadence) && done < cfg.rounds {
                    write_atomic(p, &serde_json::to_vec(&sim.checkpoint(cfg))?)?;
                }
            }
            if stop && done < cfg.rounds {
                return Ok(());
            }
            if done % 50 == 0 {
                log::info!("round {done}/{}", cfg.rounds);
            }
        }
        Ok(())
    })?;
    if sim.next_round < cfg.rounds {
        return Ok(None);
    }

    let node_evaluations = (0..cfg.num_nodes)
        .map(|k| evaluate(&sim.global, sim.nodes[k].shard()))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, &setup, &sim.records);
    let out = RunOutput {
        config: cfg.clone(),
        setup,
        records: sim.records,
        summary,
        final_model: sim.global,
        node_evaluations,
    };
    if let Some(dir) = &opts.out_dir {
        write_outputs(dir, &out)?;
        if let Some(p) = &ck_path {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    Ok(Some(out))
}

fn summarize(cfg: &ExperimentConfig, setup: &Setup, records: &RunRecords) -> RunSummary {
    let test_acc: Vec<f64> = records.metrics.iter().map(|m| m.test.accuracy).collect();
    let train_acc: Vec<f64> = records.metrics.iter().map(|m| m.train.accuracy).collect();
    let last = records.metrics.last();
    let quarter_start = cfg.rounds - cfg.rounds / 4;
    let late: Vec<f64> = records
        .rounds
        .iter()
        .filter(|r| r.round >= quarter_start)
        .filter_map(|r| r.deviation)
        .collect();
    let mean_participants = if records.rounds.is_empty() {
        0.0
    } else {
        records.rounds.iter().map(|r| r.participants as f64).sum::<f64>() / records.rounds.len() as f64
    };
    RunSummary {
        variant: cfg.variant.name().to_string(),
        seed: cfg.seed,
        rounds: cfg.rounds,
        num_nodes: cfg.num_nodes,
        evaluated_rounds: records.metrics.len(),
        final_train_accuracy: last.map(|m| m.train.accuracy),
        final_train_loss: last.map(|m| m.train.loss),
        final_test_accuracy: last.map(|m| m.test.accuracy),
        final_test_loss: last.map(|m| m.test.loss),
        top5_train_accuracy: top5_mean(&train_acc).ok(),
        top5_test_accuracy: top5_mean(&test_acc).ok(),
        mean_deviation_last_quarter: (!late.is_empty()).then(|| late.iter().sum::<f64>() / late.len() as f64),
        test_accuracy_round_std: round_to_round_std(&test_acc, STABILITY_WINDOW),
        mean_participants,
        prefloor_mean_frequency: setup.frequencies.prefloor_mean,
        realized_mean_frequency: setup.frequencies.realized_mean,
        partition_redraws: setup.partition.redraws,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    seeds: StreamSeeds,
    architecture: &'a Architecture,
    parameters: usize,
    train_samples: usize,
    test_samples: usize,
    files: &'static [&'static str],
}

#[derive(Serialize)]
struct HeterogeneityReport<'a> {
    class_counts: &'a [Vec<usize>],
    frequencies: &'a FrequencyAssignment,
    partition_redraws: usize,
}

pub const OUTPUT_FILES: &[&str] = &[
    "manifest.json",
    "summary.json",
    "metrics.csv",
    "weights.csv",
    "cdf.csv",
    "participation.csv",
    "heterogeneity.json",
    "model.bin",
];

/// Writes every output file. Contents depend only on the configuration.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        dir,
        "manifest.json",
        &Manifest {
            tool: "pmfl",
            version: env!("CARGO_PKG_VERSION"),
            config: &out.config,
            seeds: out.setup.seeds,
            architecture: &out.setup.architecture,
            parameters: out.final_model.len(),
            train_samples: out.setup.data.train.len(),
            test_samples: out.setup.data.test.len(),
            files: OUTPUT_FILES,
        },
    )?;
    write_json(dir, "summary.json", &out.summary)?;
    write_json(
        dir,
        "heterogeneity.json",
        &HeterogeneityReport {
            class_counts: &out.setup.partition.class_counts,
            frequencies: &out.setup.frequencies,
            partition_redraws: out.setup.partition.redraws,
        },
    )?;

    let mut metrics = String::from("round,participants,deviation,psi,train_accuracy,train_loss,test_accuracy,test_loss\n");
    for m in &out.records.metrics {
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.round,
            m.participants,
            opt(m.deviation),
            opt(m.psi),
            m.train.accuracy,
            m.train.loss,
            m.test.accuracy,
            m.test.loss
        ));
    }
    write_atomic(&dir.join("metrics.csv"), metrics.as_bytes())?;

    let mut weights = String::from("round,participants,deviation,psi");
    for k in 0..out.config.num_nodes {
        weights.push_str(&format!(",x_{k}"));
    }
    weights.push('\n');
    for r in &out.records.rounds {
        weights.push_str(&format!("{},{},{},{}", r.round, r.participants, opt(r.deviation), opt(r.psi)));
        for x in &r.weights {
            weights.push_str(&format!(",{x}"));
        }
        weights.push('\n');
    }
    write_atomic(&dir.join("weights.csv"), weights.as_bytes())?;

    let mut cdf = String::from("metric,value,fraction\n");
    for (name, values) in [
        ("node_accuracy", out.node_evaluations.iter().map(|e| e.accuracy).collect::<Vec<_>>()),
        ("node_loss", out.node_evaluations.iter().map(|e| e.loss).collect()),
    ] {
        for (v, f) in node_cdf(&values)? {
            cdf.push_str(&format!("{name},{v},{f}\n"));
        }
    }
    write_atomic(&dir.join("cdf.csv"), cdf.as_bytes())?;

    let mut trace = Vec::new();
    out.setup.traces.write_csv(&mut trace)?;
    write_atomic(&dir.join("participation.csv"), &trace)?;
    save_model(&dir.join("model.bin"), &out.final_model)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(name), &bytes)
}
