//! Rendering throughput as the number of context views grows.
//!
//! Run with `cargo run --release --example render_bench`.

use svsm_lab::harness::{bench_batches, bench_render};
use svsm_lab::models::{Model, ModelConfig};

fn main() -> svsm_lab::Result<()> {
    let models = [
        ("svsm", ModelConfig::svsm(128, 2, 2, 32, 8)),
        ("lvsm", ModelConfig::lvsm(128, 4, 32, 8)),
    ];
    for (name, c) in models {
        let m = Model::<f32>::new(c.clone(), 0)?;
        for vc in [2, 4, 8] {
            let (ctx, tgt) = bench_batches::<f32>(&c, vc, 1, 8, 32, 1)?;
            let r = bench_render(&m, &ctx, &tgt, 5, 20)?;
            let flag = if r.unstable { " (unstable)" } else { "" };
            println!("{name} V_C={vc}: {:.0} FPS, {:.2} ms/iter, cv {:.2}{flag}", r.fps, r.t_iter * 1e3, r.cv);
        }
    }
    Ok(())
}
