//! Reconstruction loss: pixel MSE plus a perceptual term.
//!
//! No pretrained perceptual network is available here, so the perceptual
//! term compares activations of a frozen, randomly initialized three-layer
//! convolutional stack built from a fixed seed.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Seed of the frozen feature extractor.
pub const PERCEPTUAL_SEED: u64 = 20_240_517;
/// Weight of the perceptual term.
pub const PERCEPTUAL_WEIGHT: f64 = 0.5;

/// `(in, out, stride)` of each 3x3 layer.
const LAYERS: [(usize, usize, usize); 3] = [(3, 8, 2), (8, 16, 2), (16, 16, 1)];

#[derive(Clone, Debug)]
pub struct PerceptualNet<T> {
    layers: Vec<(Arc<Tensor<T>>, usize)>,
}

impl<T: Scalar> PerceptualNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = LAYERS
            .iter()
            .map(|&(cin, cout, stride)| {
                let std = (1.0 / (9 * cin) as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                let n = 9 * cin * cout;
                let w: Vec<T> = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
                (Arc::new(Tensor::new(&[3, 3, cin, cout], w).unwrap()), stride)
            })
            .collect();
        PerceptualNet { layers }
    }

    pub fn standard() -> Self {
        Self::new(PERCEPTUAL_SEED)
    }
}

/// Activations of each layer for channels-last images `[N, H, W, 3]`.
pub fn perceptual_features<T: Scalar>(tape: &mut Tape<T>, net: &PerceptualNet<T>, images: Var) -> Result<Vec<Var>> {
    let mut x = images;
    let mut out = Vec::with_capacity(net.layers.len());
    for (w, stride) in &net.layers {
        let y = tape.conv2d_frozen(x, w.clone(), *stride, 1)?;
        x = tape.tanh(y);
        out.push(x);
    }
    Ok(out)
}

/// Rearranges patch rows `[N', n_tokens, 3p^2]` into images `[N, H, W, 3]`.
fn patches_to_images<T: Scalar>(tape: &mut Tape<T>, x: Var, n: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    let (th, tw) = (h / p, w / p);
    let index: Arc<[usize]> = (0..n)
        .flat_map(|img| {
            (0..h).flat_map(move |y| (0..tw).map(move |tx| ((img * th + y / p) * tw + tx) * p + y % p))
        })
        .collect();
    tape.gather(x, 3 * p, index, &[n, h, w, 3])
}

/// `MSE(pred, gt) + lambda * sum_l MSE(phi_l(pred), phi_l(gt))` for patch
/// tensors holding `n` images of `h x w` with patch size `p`.
pub fn training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    (n, h, w, p): (usize, usize, usize, usize),
    lambda: T,
    net: &PerceptualNet<T>,
) -> Result<Var> {
    if tape.shape(pred) != tape.shape(gt) {
        return Err(Error::dim(format!(
            "loss: prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(gt)
        )));
    }
    if tape.value(pred).numel() != n * h * w * 3 {
        return Err(Error::dim("loss: image geometry does not match the tensors"));
    }
    let mse = tape.mse(pred, gt)?;
    if lambda == T::zero() {
        return Ok(mse);
    }
    let pi = patches_to_images(tape, pred, n, h, w, p)?;
    let gi = patches_to_images(tape, gt, n, h, w, p)?;
    let fp = perceptual_features(tape, net, pi)?;
    let fg = perceptual_features(tape, net, gi)?;
    let mut perceptual: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(fg) {
        let term = tape.mse(a, b)?;
        perceptual = Some(match perceptual {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    tape.add_scaled(mse, perceptual.expect("at least one layer"), lambda)
}
