use std::collections::BTreeSet;

use svsm_lab::harness::{
    eval_episodes, runs_dir, sweep, train_run, DataConfig, ExperimentConfig, ModelVariant, SweepConfig,
};
use svsm_lab::models::{Family, ModelConfig};
use svsm_lab::scaling::{read_run_log, RunLogRecord};
use svsm_lab::scenegen::assert_disjoint;
use svsm_lab::tensor::{OptimizerConfig, Precision};
use svsm_lab::Error;

fn config(steps: u64) -> ExperimentConfig {
    ExperimentConfig {
        run_id: "smoke".into(),
        model: ModelConfig::svsm(16, 1, 1, 8, 4),
        data: DataConfig::synthetic(8, 8, 16),
        vc: 2,
        vt: 2,
        batch: 4,
        effective_batch: Some(8),
        steps,
        seed: 5,
        precision: Precision::F32,
        eval_every: steps,
        log_every: 10,
        eval_scene_count: 8,
        optimizer: OptimizerConfig {
            peak_lr: 2e-3,
            ..Default::default()
        },
        warmup_fraction: Some(0.05),
    }
}

#[test]
fn short_run_reduces_the_loss() {
    let out = train_run(&config(200), &mut |_| Ok(())).unwrap();
    let first = &out.records[0];
    let last = out.records.last().unwrap();
    assert_eq!(last.step, 200);
    assert!(last.eval_loss < first.eval_loss, "{} -> {}", first.eval_loss, last.eval_loss);
    let train: Vec<f64> = out.records.iter().filter(|r| r.train_loss.is_finite()).map(|r| r.train_loss).collect();
    assert!(train.last().unwrap() < &train[0]);
}

#[test]
fn float64_runs_repeat_bit_for_bit() {
    let mut c = config(20);
    c.precision = Precision::F64;
    let a = train_run(&c, &mut |_| Ok(())).unwrap();
    let b = train_run(&c, &mut |_| Ok(())).unwrap();
    let strip = |r: &[RunLogRecord]| -> Vec<(u64, u64, u64)> {
        r.iter().map(|x| (x.step, x.train_loss.to_bits(), x.eval_loss.to_bits())).collect()
    };
    assert_eq!(strip(&a.records), strip(&b.records));
}

#[test]
fn divergence_stops_the_run_with_a_record() {
    let mut c = config(10);
    c.optimizer.peak_lr = 1e200;
    c.warmup_fraction = Some(0.0);
    let mut seen = Vec::new();
    let err = train_run(&c, &mut |r| {
        seen.push(r.clone());
        Ok(())
    })
    .err()
    .unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    assert!(!seen.last().unwrap().train_loss.is_finite());
}

#[test]
fn evaluation_scenes_are_held_out() {
    let c = config(1);
    let eval: Vec<u64> = eval_episodes(&c).unwrap().iter().map(|e| e.scene_id).collect();
    assert_eq!(eval.len(), 8);
    assert_disjoint(&c.data.train_seeds(), &eval).unwrap();
    let mut clash = c.clone();
    clash.data.eval_seed_base = 10;
    assert!(clash.validate().is_err());
}

fn grid() -> Vec<ExperimentConfig> {
    let mut base = config(4);
    base.eval_every = 2;
    base.log_every = 1;
    base.eval_scene_count = 2;
    base.data.train_scenes = 4;
    SweepConfig {
        models: vec![
            ModelVariant {
                name: "svsm".into(),
                model: base.model.clone(),
            },
            ModelVariant {
                name: "lvsm".into(),
                model: ModelConfig::lvsm(16, 1, 8, 4).with_family(Family::LvsmDec),
            },
        ],
        base,
        steps: vec![2, 4],
        batch_views: vec![],
        seeds: vec![],
        flops_budgets: vec![],
        evals_per_run: None,
        workers: 1,
    }
    .expand()
    .unwrap()
}

/// Serialized records with the wall clock zeroed; NaN metrics compare as null.
fn without_clock(path: &std::path::Path) -> Vec<String> {
    read_run_log(path)
        .unwrap()
        .into_iter()
        .map(|mut r| {
            r.wall_seconds = 0.0;
            serde_json::to_string(&r).unwrap()
        })
        .collect()
}

#[test]
fn sweeps_resume_without_duplicates() {
    let grid = grid();
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.jsonl");
    let s = sweep(&grid, &full, 2).unwrap();
    assert_eq!(s.completed.len(), 4);
    let ids: BTreeSet<String> = read_run_log(&full).unwrap().into_iter().map(|r| r.run_id).collect();
    assert_eq!(ids.len(), 4);

    let first = std::fs::read(&full).unwrap();
    let again = sweep(&grid, &full, 1).unwrap();
    assert_eq!((again.completed.len(), again.skipped.len()), (0, 4));
    assert_eq!(std::fs::read(&full).unwrap(), first);

    // an interrupted sweep: two runs finished, one left a partial file
    let part = dir.path().join("part.jsonl");
    sweep(&grid[..2], &part, 1).unwrap();
    let stale = runs_dir(&part).join(format!("{}.jsonl.tmp", grid[2].run_id));
    std::fs::write(&stale, "{\"partial\":\n").unwrap();
    let resumed = sweep(&grid, &part, 1).unwrap();
    assert_eq!((resumed.completed.len(), resumed.skipped.len()), (2, 2));
    assert_eq!(without_clock(&part), without_clock(&full));
    let keys: Vec<(String, u64)> = read_run_log(&part).unwrap().iter().map(|r| (r.run_id.clone(), r.step)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(keys, sorted);
}

#[test]
fn failed_runs_do_not_stop_the_sweep() {
    let mut grid = grid();
    grid[1].optimizer.peak_lr = 1e200;
    grid[1].warmup_fraction = Some(0.0);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let s = sweep(&grid, &log, 1).unwrap();
    assert_eq!(s.failed.len(), 1);
    assert_eq!(s.completed.len(), 3);
    assert!(!runs_dir(&log).join(format!("{}.jsonl", grid[1].run_id)).exists());
}
