//! Short runs at equal B * V_T, summarized by effective batch.
//!
//! Run with `cargo run --release --example effective_batch`. The stored
//! full-size experiment lives in `experiments/effective_batch.json`.

use svsm_lab::harness::{train_run, DataConfig, ExperimentConfig};
use svsm_lab::models::ModelConfig;
use svsm_lab::scaling::effective_batch_report;
use svsm_lab::tensor::{OptimizerConfig, Precision};

fn main() -> svsm_lab::Result<()> {
    let mut records = Vec::new();
    for (b, vt) in [(8, 1), (4, 2), (2, 4), (4, 1), (2, 2), (1, 4)] {
        let config = ExperimentConfig {
            run_id: format!("b{b}x{vt}"),
            model: ModelConfig::svsm(16, 1, 1, 8, 8),
            data: DataConfig::synthetic(16, 16, 64),
            vc: 2,
            vt,
            batch: b,
            effective_batch: Some(b * vt),
            steps: 150,
            seed: 0,
            precision: Precision::F32,
            eval_every: 150,
            log_every: 1,
            eval_scene_count: 16,
            optimizer: OptimizerConfig::default(),
            warmup_fraction: Some(0.03),
        };
        records.extend(train_run(&config, &mut |_| Ok(()))?.records);
    }
    let report = effective_batch_report(&records, 20)?;
    for g in &report.groups {
        println!("B_eff {:>2}: {:?} final PSNR {:.2?}, spread {:.2} dB", g.b_eff, g.run_ids, g.final_psnr, g.spread);
    }
    println!("gap between group means {:.2} dB", report.across_spread);
    Ok(())
}
