use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pmfl::harness::dataset::{save_csv, synth_dataset, MixtureSpec};
use pmfl::harness::model_io::load_model;
use pmfl::harness::{run_experiment, run_sweep, RunOptions, Setup, SweepAxis, SweepPlan};
use pmfl::{ExperimentConfig, Variant};

#[derive(Parser)]
#[command(name = "pmfl", version, about = "Federated-learning simulator under heterogeneous participation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many rounds, leaving a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run a grid of experiments.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Swept key and values, e.g. `--axis lambda=0,0.5` (repeatable).
        #[arg(long = "axis", value_name = "KEY=V1,V2")]
        axes: Vec<String>,
        /// Seeds to repeat every grid point with: `0,3,7` or a range `0..10`.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Write the synthetic train/test data of a configuration as CSV.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Describe a configuration's setup, or a saved model file.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Model file to describe instead.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a key: `--set lambda=0.3` (repeatable, applied in order).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores. Does not change results.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rounds {
            cfg.set("rounds", &r.to_string())?;
        }
        if let Some(n) = self.nodes {
            cfg.set("num_nodes", &n.to_string())?;
        }
        if let Some(v) = &self.variant {
            if !Variant::ALL.iter().any(|x| x.name() == v) {
                let names: Vec<_> = Variant::ALL.iter().map(|x| x.name()).collect();
                bail!("unknown variant `{v}`; expected one of {}", names.join(", "));
            }
            cfg.set("variant", &format!("\"{v}\""))?;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range `{s}`");
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse::<u64>().with_context(|| format!("bad seed `{x}`")))
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            common,
            resume,
            stop_after,
            print_config,
        } => {
            let cfg = common.config()?;
            if print_config {
                print!("{}", cfg.to_toml_string());
                return Ok(());
            }
            let opts = RunOptions {
                out_dir: Some(common.out_dir()?.to_path_buf()),
                workers: common.workers,
                resume,
                stop_after,
            };
            match run_experiment(&cfg, &opts)? {
                Some(out) => println!("{}", serde_json::to_string_pretty(&out.summary)?),
                None => println!("stopped early; resume with --resume"),
            }
        }
        Command::Sweep { common, axes, seeds } => {
            let plan = SweepPlan {
                base: common.config()?,
                axes: axes.iter().map(|a| SweepAxis::parse(a)).collect::<Result<_, _>>()?,
                seeds: seeds.as_deref().map(parse_seeds).transpose()?.unwrap_or_default(),
            };
            let out = common.out_dir()?;
            let results = run_sweep(&plan, Some(out), common.workers)?;
            let failed = results.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} cells, {failed} failed; table in {}",
                results.len(),
                out.join("sweep.csv").display()
            );
        }
        Command::SynthData { common } => {
            let cfg = common.config()?;
            let data = synth_dataset(
                &MixtureSpec {
                    num_classes: cfg.num_classes,
                    input_dim: cfg.input_dim,
                    samples_per_class: cfg.samples_per_class,
                    train_fraction: cfg.train_fraction,
                    separation: cfg.class_separation,
                    noise_std: cfg.noise_std,
                },
                pmfl::harness::run::StreamSeeds::from_root(cfg.seed).data,
            )?;
            let out = common.out_dir()?;
            std::fs::create_dir_all(out)?;
            save_csv(&data.train, &out.join("train.csv"))?;
            save_csv(&data.test, &out.join("test.csv"))?;
            println!("{} train and {} test rows in {}", data.train.len(), data.test.len(), out.display());
        }
        Command::Inspect { common, model } => {
            if let Some(path) = model {
                let m = load_model(&path)?;
                println!("{}", serde_json::to_string_pretty(m.architecture())?);
                println!("parameters: {}", m.len());
                return Ok(());
            }
            let cfg = common.config()?;
            let setup = Setup::new(&cfg)?;
            let eff = cfg.effective();
            println!("variant: {} (lambda {}, local buffer {}, global buffer {})", cfg.variant.name(), eff.lambda, eff.local_buffer, eff.global_buffer);
            println!("train/test rows: {}/{}", setup.data.train.len(), setup.data.test.len());
            println!(
                "frequencies: target {}, realized mean {:.4}, min {:.4}, max {:.4}",
                cfg.target_mean_frequency,
                setup.frequencies.realized_mean,
                setup.frequencies.frequencies.iter().cloned().fold(f64::INFINITY, f64::min),
                setup.frequencies.frequencies.iter().cloned().fold(0.0, f64::max),
            );
            println!("partition redraws: {}", setup.partition.redraws);
            for (k, counts) in setup.partition.class_counts.iter().enumerate() {
                println!("node {k:>4}: p={:.4} classes={counts:?}", setup.frequencies.frequencies[k]);
            }
        }
    }
    Ok(())
}
