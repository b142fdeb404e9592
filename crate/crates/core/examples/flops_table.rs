//! Forward and training FLOPs of the two families across context lengths.
//!
//! Run with `cargo run --example flops_table`.

use svsm_lab::flops::{forward_flops, per_frame_render_flops, train_flops, FlopMode, DEFAULT_BACKWARD_MULTIPLIER};
use svsm_lab::models::ModelConfig;

fn main() -> svsm_lab::Result<()> {
    let (res, patch) = (256, 8);
    let svsm = ModelConfig::svsm(768, 12, 12, 64, patch);
    let lvsm = ModelConfig::lvsm(768, 12, 64, patch);

    println!("{:>4} {:>4} {:>14} {:>14} {:>7}", "V_C", "V_T", "svsm fwd", "lvsm fwd", "ratio");
    for (vc, vt) in [(2, 1), (2, 6), (4, 4), (8, 8), (16, 8)] {
        let s = forward_flops(&svsm, vc, vt, res, res, FlopMode::Paper).total();
        let l = forward_flops(&lvsm, vc, vt, res, res, FlopMode::Paper).total();
        let (s, l) = (s as f64, l as f64);
        println!("{vc:>4} {vt:>4} {s:>14.3e} {l:>14.3e} {:>7.2}", l / s);
    }

    println!("\nper-frame rendering cost once the scene is encoded:");
    for vc in [2, 4, 8, 16] {
        let s = per_frame_render_flops(&svsm, vc, res, res, FlopMode::Paper);
        let l = per_frame_render_flops(&lvsm, vc, res, res, FlopMode::Paper);
        println!("  V_C={vc:>2}: svsm {:.3e}  lvsm {:.3e}", s.total() as f64, l.total() as f64);
    }

    println!("\ntraining FLOPs of 10k steps at B_eff = 64:");
    for (b, vt) in [(64, 1), (16, 4), (8, 8)] {
        let s = train_flops(&svsm, 2, vt, b, 10_000, res, res, FlopMode::Paper, DEFAULT_BACKWARD_MULTIPLIER)?;
        let l = train_flops(&lvsm, 2, vt, b, 10_000, res, res, FlopMode::Paper, DEFAULT_BACKWARD_MULTIPLIER)?;
        println!("  B={b:>2} V_T={vt}: svsm {:.3e}  lvsm {:.3e}", s as f64, l as f64);
    }
    Ok(())
}
