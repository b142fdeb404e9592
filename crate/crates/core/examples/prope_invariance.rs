//! Moving the world frame leaves a fully relative model's renders unchanged,
//! while absolute ray conditioning sees the move.
//!
//! Run with `cargo run --example prope_invariance`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svsm_lab::geometry::Pose;
use svsm_lab::models::{episode_batches, Model, ModelConfig, PropeMode};
use svsm_lab::scenegen::{Episode, SceneDataset, TrajectoryConfig};
use svsm_lab::tensor::Tensor;

fn moved(ep: &Episode, g: &Pose) -> Episode {
    let mut out = ep.clone();
    let gi = g.inverse();
    for v in out.context.iter_mut().chain(out.targets.iter_mut()) {
        v.pose = v.pose.compose(&gi);
    }
    out
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn main() -> svsm_lab::Result<()> {
    let ds = SceneDataset::generate(&[3], &TrajectoryConfig::default(), 16, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ep = ds.episode(0, 2, 2, &mut rng)?;
    for mode in [PropeMode::Both, PropeMode::None] {
        let c = ModelConfig::svsm(16, 2, 2, 8, 4).with_prope(mode);
        let m = Model::<f64>::new(c.clone(), 1)?;
        let (ctx, tgt) = episode_batches::<f64>(&c, std::slice::from_ref(&ep))?;
        let base = m.render(&ctx, &tgt)?;
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let (c2, t2) = episode_batches::<f64>(&c, &[moved(&ep, &Pose::random(&mut rng, 2.0))])?;
            worst = worst.max(max_diff(&base, &m.render(&c2, &t2)?));
        }
        println!("prope {mode:?}: largest change under 5 world reframes {worst:.2e}");
    }
    Ok(())
}
