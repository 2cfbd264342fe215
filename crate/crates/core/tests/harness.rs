use std::fs;
use std::path::Path;

use pmfl::harness::dataset::{save_csv, synth_dataset, MixtureSpec};
use pmfl::harness::model_io::load_model;
use pmfl::harness::run::OUTPUT_FILES;
use pmfl::harness::{run_experiment, run_sweep, ExperimentConfig, RunOptions, SweepAxis, SweepPlan, Variant};
use pmfl::Error;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        num_nodes: 8,
        rounds: 30,
        samples_per_class: 40,
        eval_every: 3,
        ..ExperimentConfig::default()
    }
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    }
}

fn assert_same_outputs(a: &Path, b: &Path) {
    for f in OUTPUT_FILES {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        checkpoint_every: 7,
        ..small()
    };
    let full = dir.path().join("full");
    run_experiment(&cfg, &opts(&full)).unwrap().unwrap();

    let split = dir.path().join("split");
    let first = RunOptions {
        stop_after: Some(12),
        ..opts(&split)
    };
    assert!(run_experiment(&cfg, &first).unwrap().is_none());
    assert!(split.join("checkpoint.json").exists());
    let resume = RunOptions {
        resume: true,
        ..opts(&split)
    };
    run_experiment(&cfg, &resume).unwrap().unwrap();
    assert!(!split.join("checkpoint.json").exists());
    assert_same_outputs(&full, &split);
}

#[test]
fn checkpoint_for_other_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let first = RunOptions {
        stop_after: Some(5),
        ..opts(dir.path())
    };
    run_experiment(&cfg, &first).unwrap();
    let other = ExperimentConfig { lambda: 0.1, ..cfg };
    let resume = RunOptions {
        resume: true,
        ..opts(dir.path())
    };
    assert!(matches!(run_experiment(&other, &resume), Err(Error::Validation(_))));
}

#[test]
fn zero_rounds_outputs_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { rounds: 0, ..small() };
    let out = run_experiment(&cfg, &opts(dir.path())).unwrap().unwrap();
    assert!(out.records.metrics.is_empty());
    assert_eq!(out.summary.final_test_accuracy, None);
    assert_eq!(out.final_model, out.setup.initial_model().unwrap());
    assert_eq!(load_model(&dir.path().join("model.bin")).unwrap(), out.final_model);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let out = run_experiment(&cfg, &opts(dir.path())).unwrap().unwrap();
    assert_eq!(out.records.rounds.len(), 30);
    // evaluated every 3 rounds, last round included
    let rounds: Vec<usize> = out.records.metrics.iter().map(|m| m.round).collect();
    assert_eq!(rounds, (0..10).map(|i| 3 * i + 2).collect::<Vec<_>>());
    assert_eq!(out.node_evaluations.len(), 8);
    for r in &out.records.rounds {
        assert_eq!(r.weights.len(), 8);
        assert!(r.weights.iter().all(|&x| x >= 1.0));
        assert_eq!(r.psi.is_some(), r.round > 0, "smoothing starts once history exists");
    }
    let weights = fs::read_to_string(dir.path().join("weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 31);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["num_nodes"], 8);
    let trace = fs::read_to_string(dir.path().join("participation.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap().split(',').count(), 9);
}

#[test]
fn every_variant_runs() {
    for v in Variant::ALL {
        let cfg = ExperimentConfig {
            variant: v,
            rounds: 10,
            ..small()
        };
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap().unwrap();
        assert!(out.summary.final_test_accuracy.unwrap() >= 0.0, "{}", v.name());
    }
}

#[test]
fn more_nodes_than_samples_is_degenerate() {
    let cfg = ExperimentConfig {
        num_nodes: 200,
        samples_per_class: 5,
        num_classes: 3,
        input_dim: 3,
        ..small()
    };
    assert!(matches!(
        run_experiment(&cfg, &RunOptions::default()),
        Err(Error::DegeneratePartition(_))
    ));
}

#[test]
fn csv_data_source_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(
        &MixtureSpec {
            num_classes: 4,
            input_dim: 5,
            samples_per_class: 30,
            train_fraction: 0.8,
            separation: 2.0,
            noise_std: 0.5,
        },
        1,
    )
    .unwrap();
    let path = dir.path().join("all.csv");
    save_csv(&pmfl::Dataset::concat([&data.train, &data.test]).unwrap(), &path).unwrap();
    let mut cfg = small();
    cfg.set("data_path", &format!("\"{}\"", path.display())).unwrap();
    cfg.set("data_source", "\"csv\"").unwrap();
    cfg.data_standardize = true;
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap().unwrap();
    assert_eq!(out.setup.architecture.input_dim, 5);
    assert_eq!(out.setup.data.train.len() + out.setup.data.test.len(), 120);
}

#[test]
fn sweep_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let plan = SweepPlan {
        base: ExperimentConfig { rounds: 6, ..small() },
        axes: vec![SweepAxis::parse("tau=0.5,0").unwrap()],
        seeds: vec![1, 2],
    };
    let results = run_sweep(&plan, Some(dir.path()), 2).unwrap();
    assert_eq!(results.len(), 4);
    assert!(results[..2].iter().all(|r| r.error.is_none() && r.summary.is_some()));
    assert!(results[2..].iter().all(|r| r.error.as_deref().unwrap().contains("tau")));
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(dir.path().join("cell_0001").join("metrics.csv").exists());

    let bad = SweepPlan {
        axes: vec![SweepAxis::parse("lamda=1").unwrap()],
        ..plan
    };
    assert!(matches!(run_sweep(&bad, None, 1), Err(Error::Config { .. })));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let mut cfg = small();
    cfg.set("pattern", "cyclic").unwrap();
    fs::write(&path, cfg.to_toml_string()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    fs::write(&path, "seed = 1\n").unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}
