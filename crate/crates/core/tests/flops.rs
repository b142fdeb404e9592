mod common;

use common::episodes;
use svsm_lab::flops::{forward_flops, per_frame_render_flops, FlopMode};
use svsm_lab::models::{episode_batches, Family, Model, ModelConfig, PropeMode};

#[test]
fn exact_mode_matches_the_tape_counter() {
    let (vc, vt, res) = (2, 3, 16);
    let eps = episodes(2, vc, vt, res, 31);
    for family in Family::ALL {
        for prope in [PropeMode::None, PropeMode::Both] {
            let c = ModelConfig::svsm(16, 2, 1, 8, 4)
                .with_family(family)
                .with_prope(prope)
                .with_fixed_latent(6);
            let m = Model::<f32>::new(c.clone(), 0).unwrap();
            let (ctx, tgt) = episode_batches::<f32>(&c, &eps).unwrap();
            let (_, counted) = m.render_counted(&ctx, &tgt).unwrap();
            let predicted = forward_flops(&c, vc, vt, res, res, FlopMode::Exact);
            let scenes = eps.len() as u128;
            assert_eq!(counted.total() as u128, scenes * predicted.total(), "{family} {prope:?}");
            assert_eq!(counted.attention as u128, scenes * predicted.attn, "{family} {prope:?}");
        }
    }
}

#[test]
fn decode_only_counter_matches_per_frame_cost() {
    let (vc, res) = (3, 16);
    let eps = episodes(1, vc, 1, res, 32);
    let c = ModelConfig::svsm(16, 1, 2, 8, 4);
    let m = Model::<f32>::new(c.clone(), 0).unwrap();
    let (ctx, tgt) = episode_batches::<f32>(&c, &eps).unwrap();
    let z = m.encode(&ctx).unwrap();
    let (_, counted) = m.decode_counted(&z, &tgt).unwrap();
    assert_eq!(counted.total() as u128, per_frame_render_flops(&c, vc, res, res, FlopMode::Exact).total());
}
