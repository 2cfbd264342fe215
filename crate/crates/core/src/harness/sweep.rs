//! Cartesian sweeps over configuration keys and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::run::{run_experiment, RunOptions, RunSummary};

/// One swept key and its textual values (TOML syntax, as for overrides).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    /// Parses `key=v1,v2,...`; commas inside brackets do not split values.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, rest) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(spec, "axis must look like key=v1,v2,..."))?;
        let mut values = Vec::new();
        let mut depth = 0i32;
        let mut cur = String::new();
        for ch in rest.chars() {
            match ch {
                '[' => depth += 1,
                ']' => depth -= 1,
                ',' if depth == 0 => {
                    values.push(std::mem::take(&mut cur).trim().to_string());
                    continue;
                }
                _ => {}
            }
            cur.push(ch);
        }
        values.push(cur.trim().to_string());
        if values.iter().any(String::is_empty) {
            return Err(Error::config(key.trim(), "empty sweep value"));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub base: ExperimentConfig,
    pub axes: Vec<SweepAxis>,
    pub seeds: Vec<u64>,
}

/// One grid point with a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub seed: u64,
    pub assignments: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cell: SweepCell,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

impl SweepPlan {
    /// Cells in row-major order over the axes, seeds varying fastest.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for axis in &self.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut next = c.clone();
                        next.push((axis.key.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        let seeds = if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        };
        combos
            .into_iter()
            .flat_map(|a| seeds.iter().map(move |&s| (a.clone(), s)))
            .enumerate()
            .map(|(index, (assignments, seed))| SweepCell {
                index,
                seed,
                assignments,
            })
            .collect()
    }

    pub fn config_for(&self, cell: &SweepCell) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        for (k, v) in &cell.assignments {
            cfg.set(k, v)?;
        }
        cfg.seed = cell.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cell_dir(root: &Path, cell: &SweepCell) -> PathBuf {
    root.join(format!("cell_{:04}", cell.index))
}

/// Runs every cell; failures are recorded per cell and do not stop the sweep.
/// Cells run in parallel on `workers` threads (0 = pool default), each single-threaded.
pub fn run_sweep(plan: &SweepPlan, out_dir: Option<&Path>, workers: usize) -> Result<Vec<SweepResult>> {
    // reject unknown axis keys before spending any compute
    if let Some(axis) = plan.axes.iter().find(|a| !plan.base.has_key(&a.key)) {
        return Err(Error::config(&axis.key, "unknown key"));
    }
    let cells = plan.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let results: Vec<SweepResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let outcome = plan.config_for(cell).and_then(|cfg| {
                    let opts = RunOptions {
                        out_dir: out_dir.map(|d| cell_dir(d, cell)),
                        workers: 1,
                        ..RunOptions::default()
                    };
                    run_experiment(&cfg, &opts)
                });
                match outcome {
                    Ok(out) => SweepResult {
                        cell: cell.clone(),
                        summary: out.map(|o| o.summary),
                        error: None,
                    },
                    Err(e) => {
                        log::error!("sweep cell {} failed: {e}", cell.index);
                        SweepResult {
                            cell: cell.clone(),
                            summary: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("sweep.csv");
        fs::write(&path, sweep_csv(plan, &results)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(results)
}

/// One row per cell: index, seed, axis values, status and headline metrics.
pub fn sweep_csv(plan: &SweepPlan, results: &[SweepResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["cell".into(), "seed".into()];
    header.extend(plan.axes.iter().map(|a| a.key.clone()));
    header.extend(
        [
            "status",
            "top5_test_accuracy",
            "final_test_accuracy",
            "mean_deviation_last_quarter",
            "test_accuracy_round_std",
            "error",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        let mut rec = vec![r.cell.index.to_string(), r.cell.seed.to_string()];
        rec.extend(r.cell.assignments.iter().map(|(_, v)| v.clone()));
        let s = r.summary.as_ref();
        rec.push(if r.error.is_some() { "failed" } else { "ok" }.to_string());
        rec.push(opt(s.and_then(|s| s.top5_test_accuracy)));
        rec.push(opt(s.and_then(|s| s.final_test_accuracy)));
        rec.push(opt(s.and_then(|s| s.mean_deviation_last_quarter)));
        rec.push(opt(s.and_then(|s| s.test_accuracy_round_std)));
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::io("sweep csv", e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_respects_brackets() {
        let a = SweepAxis::parse("encoder_dims=[8,8],[16]").unwrap();
        assert_eq!(a.key, "encoder_dims");
        assert_eq!(a.values, vec!["[8,8]", "[16]"]);
        assert_eq!(SweepAxis::parse("cutoff=10, inf").unwrap().values, vec!["10", "inf"]);
        assert!(SweepAxis::parse("lambda").is_err());
        assert!(SweepAxis::parse("lambda=0,,1").is_err());
    }

    #[test]
    fn cells_are_row_major_with_seeds_fastest() {
        let plan = SweepPlan {
            base: ExperimentConfig::default(),
            axes: vec![
                SweepAxis::parse("lambda=0,1").unwrap(),
                SweepAxis::parse("global_buffer=0,3").unwrap(),
            ],
            seeds: vec![5, 6],
        };
        let cells = plan.cells();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0].assignments, vec![("lambda".into(), "0".into()), ("global_buffer".into(), "0".into())]);
        assert_eq!((cells[0].seed, cells[1].seed), (5, 6));
        assert_eq!(cells[2].assignments[1].1, "3");
        assert_eq!(cells[4].assignments[0].1, "1");
        let cfg = plan.config_for(&cells[7]).unwrap();
        assert_eq!((cfg.lambda, cfg.global_buffer, cfg.seed), (1.0, 3, 6));
    }
}
