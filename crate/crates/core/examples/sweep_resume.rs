//! A small resumable sweep: rerunning it skips every finished run.
//!
//! Run with `cargo run --release --example sweep_resume -- [log.jsonl]`.

use std::path::PathBuf;

use svsm_lab::harness::{sweep, DataConfig, ExperimentConfig, ModelVariant, SweepConfig};
use svsm_lab::models::ModelConfig;
use svsm_lab::scaling::read_run_log;
use svsm_lab::tensor::{OptimizerConfig, Precision};

fn main() -> svsm_lab::Result<()> {
    let log = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("svsm-sweep.jsonl"));
    let base = ExperimentConfig {
        run_id: "base".into(),
        model: ModelConfig::svsm(16, 1, 1, 8, 8),
        data: DataConfig::synthetic(16, 16, 32),
        vc: 2,
        vt: 2,
        batch: 4,
        effective_batch: None,
        steps: 40,
        seed: 0,
        precision: Precision::F32,
        eval_every: 20,
        log_every: 10,
        eval_scene_count: 8,
        optimizer: OptimizerConfig { peak_lr: 1e-3, ..Default::default() },
        warmup_fraction: Some(0.05),
    };
    let grid = SweepConfig {
        models: vec![
            ModelVariant { name: "svsm".into(), model: base.model.clone() },
            ModelVariant { name: "lvsm".into(), model: ModelConfig::lvsm(16, 2, 8, 8) },
        ],
        base,
        steps: vec![20, 40],
        batch_views: vec![],
        seeds: vec![],
        flops_budgets: vec![],
        evals_per_run: None,
        workers: 2,
    };
    let runs = grid.expand()?;
    let first = sweep(&runs, &log, grid.workers)?;
    println!("first pass: {} completed, {} skipped", first.completed.len(), first.skipped.len());
    let second = sweep(&runs, &log, grid.workers)?;
    println!("second pass: {} completed, {} skipped", second.completed.len(), second.skipped.len());
    for r in read_run_log(&log)?.iter().filter(|r| r.has_eval() && r.step > 0) {
        println!("{:<24} step {:>3}  flops {:.3e}  eval loss {:.4}", r.run_id, r.step, r.flops as f64, r.eval_loss);
    }
    Ok(())
}
