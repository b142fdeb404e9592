//! Trains a small encoder-decoder model for a few hundred steps on CPU.
//!
//! Run with `cargo run --release --example train_tiny`.

use svsm_lab::harness::{train_run, DataConfig, ExperimentConfig};
use svsm_lab::models::{ModelConfig, PropeMode};
use svsm_lab::tensor::{OptimizerConfig, Precision};

fn main() -> svsm_lab::Result<()> {
    let config = ExperimentConfig {
        run_id: "tiny".into(),
        model: ModelConfig::svsm(32, 2, 2, 8, 8).with_prope(PropeMode::Both),
        data: DataConfig::synthetic(32, 32, 64),
        vc: 2,
        vt: 4,
        batch: 4,
        effective_batch: Some(16),
        steps: 300,
        seed: 0,
        precision: Precision::F32,
        eval_every: 100,
        log_every: 50,
        eval_scene_count: 16,
        optimizer: OptimizerConfig { peak_lr: 1e-3, ..Default::default() },
        warmup_fraction: Some(0.05),
    };
    let out = train_run(&config, &mut |r| {
        if r.has_eval() {
            println!("step {:>4}  eval loss {:.4}  psnr {:.2}  ssim {:.3}", r.step, r.eval_loss, r.eval_psnr, r.eval_ssim);
        } else {
            println!("step {:>4}  train loss {:.4}", r.step, r.train_loss);
        }
        Ok(())
    })?;
    let last = out.records.last().unwrap();
    println!("{} parameters, {:.3e} training FLOPs, D = {}", out.model.param_count(), last.flops as f64, last.d);
    Ok(())
}
