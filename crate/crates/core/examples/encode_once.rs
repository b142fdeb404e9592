//! One scene encoding serves any number of target renders.
//!
//! Run with `cargo run --example encode_once`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svsm_lab::models::{episode_batches, Model, ModelConfig};
use svsm_lab::scenegen::{SceneDataset, TrajectoryConfig};

fn main() -> svsm_lab::Result<()> {
    let c = ModelConfig::svsm(32, 2, 2, 8, 8);
    let model = Model::<f32>::new(c.clone(), 0)?;
    let ds = SceneDataset::generate(&[7], &TrajectoryConfig::default(), 32, 32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let first = ds.episode(0, 2, 1, &mut rng)?;
    let (ctx, _) = episode_batches::<f32>(&c, std::slice::from_ref(&first))?;
    let (z, enc) = (model.encode(&ctx)?, model.counters().encoded_scenes());
    println!("encoded once: {} latent tokens", z.tokens());

    for view in 0..6 {
        let mut ep = first.clone();
        ep.targets = vec![ds.scenes[0][view * 4].clone()];
        let (_, tgt) = episode_batches::<f32>(&c, &[ep])?;
        let (_, flops) = model.decode_counted(&z, &tgt)?;
        println!("frame {view}: decode cost {} FLOPs", flops.total());
    }
    assert_eq!(model.counters().encoded_scenes(), enc);
    println!("encoder ran {} time(s) for 6 frames", model.counters().encoded_scenes());
    Ok(())
}
