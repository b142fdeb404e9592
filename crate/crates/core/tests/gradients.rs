mod common;

use std::sync::Arc;

use common::{episodes, well_conditioned};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svsm_lab::models::{episode_batches, Family, Model, ModelConfig, PerceptualNet, PropeMode};
use svsm_lab::tensor::{check_gradients, grad_check, GradOp, Tensor};

const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn registered_operators_pass() {
    for op in GradOp::ALL {
        let r = grad_check(op, 17, TOL).unwrap();
        assert!(r.passed, "{}: {:e}", op.name(), r.max_rel_err);
    }
}

#[test]
fn elementwise_and_shape_operators_pass() {
    let (a, b) = (random(&[3, 4], 1), random(&[3, 4], 2));
    let cases: Vec<(&str, Box<dyn Fn(&mut svsm_lab::tensor::Tape<f64>, &[svsm_lab::tensor::Var]) -> svsm_lab::Result<svsm_lab::tensor::Var>>)> = vec![
        ("add", Box::new(|t, v| { let s = t.add(v[0], v[1])?; let s = t.mul(s, s)?; Ok(t.sum(s)) })),
        ("mul", Box::new(|t, v| { let s = t.mul(v[0], v[1])?; Ok(t.sum(s)) })),
        ("scale", Box::new(|t, v| { let s = t.scale(v[0], 1.7); let s = t.mul(s, v[1])?; Ok(t.sum(s)) })),
        ("reshape", Box::new(|t, v| {
            let r = t.reshape(v[0], &[4, 3])?;
            let r = t.reshape(r, &[3, 4])?;
            let s = t.mul(r, v[1])?;
            Ok(t.sum(s))
        })),
    ];
    for (name, f) in cases {
        let r = check_gradients(name, &[a.clone(), b.clone()], TOL, |t, v| f(t, v)).unwrap();
        assert!(r.passed, "{name}: {:e}", r.max_rel_err);
    }
}

#[test]
fn frozen_convolution_with_stride_passes() {
    let w = Arc::new(random(&[3, 3, 2, 3], 5));
    let r = check_gradients("conv stride 2", &[random(&[1, 6, 6, 2], 4)], TOL, |t, v| {
        let y = t.conv2d_frozen(v[0], w.clone(), 2, 1)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.passed, "{:e}", r.max_rel_err);
}

#[test]
fn end_to_end_loss_passes_for_every_family() {
    let eps = episodes(1, 2, 1, 8, 21);
    let net = PerceptualNet::<f64>::standard();
    for family in Family::ALL {
        let c = ModelConfig::svsm(8, 1, 1, 4, 4)
            .with_family(family)
            .with_prope(PropeMode::Both)
            .with_fixed_latent(2);
        let m = well_conditioned(Model::<f64>::new(c.clone(), 3).unwrap());
        let (ctx, tgt) = episode_batches::<f64>(&c, &eps).unwrap();
        let r = check_gradients(family.as_str(), m.params(), TOL, |t, vars| m.loss_on(t, vars, &ctx, &tgt, &net)).unwrap();
        assert!(r.passed, "{family}: {:e} over {} entries", r.max_rel_err, r.checked);
    }
}
