//! Finite-difference verification of the tape's backward rules.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{self, MlpVars};
use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest per-element `|analytic - numeric| / max(|analytic|, |numeric|, floor)`,
    /// where `floor` is 1e-3 of the largest numeric gradient magnitude.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Operators with a registered gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Linear,
    Attention,
    Mlp,
    LayerNorm,
    ResidualAdd,
    Gelu,
    Sigmoid,
    Tanh,
    Rho,
    Gather,
    Concat,
    Mse,
    Conv2d,
}

impl GradOp {
    pub const ALL: [GradOp; 13] = [
        GradOp::Linear,
        GradOp::Attention,
        GradOp::Mlp,
        GradOp::LayerNorm,
        GradOp::ResidualAdd,
        GradOp::Gelu,
        GradOp::Sigmoid,
        GradOp::Tanh,
        GradOp::Rho,
        GradOp::Gather,
        GradOp::Concat,
        GradOp::Mse,
        GradOp::Conv2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Linear => "linear",
            GradOp::Attention => "attention_block",
            GradOp::Mlp => "mlp_block",
            GradOp::LayerNorm => "layer_norm",
            GradOp::ResidualAdd => "residual_add",
            GradOp::Gelu => "gelu",
            GradOp::Sigmoid => "sigmoid",
            GradOp::Tanh => "tanh",
            GradOp::Rho => "rho",
            GradOp::Gather => "gather",
            GradOp::Concat => "concat_tokens",
            GradOp::Mse => "mse",
            GradOp::Conv2d => "conv2d_frozen",
        }
    }
}

/// Central differences of a scalar function.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

/// Checks the gradient of `build(tape, inputs) -> scalar` with respect to every
/// input tensor, in 64-bit.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = if grads { Tape::new() } else { Tape::inference() };
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let l = tape.value(loss).item();
        if !grads {
            return Ok((l, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        let out = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((l, out))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    for (idx, input) in inputs.iter().enumerate() {
        let f = |x: &[f64]| {
            let mut probe = inputs.to_vec();
            probe[idx] = Tensor::new(input.shape(), x.to_vec()).unwrap();
            eval(&probe, false).map(|(l, _)| l).unwrap_or(f64::NAN)
        };
        let numeric = central_difference(f, input.data(), 1e-5);
        let scale = numeric.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        for (&a, &n) in analytic[idx].data().iter().zip(&numeric) {
            let abs = (a - n).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(floor));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked,
        tolerance,
        passed: max_rel < tolerance && max_rel.is_finite(),
    })
}

/// Contracts `y` with a fixed random tensor so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random(tape.shape(y), &mut rng, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Runs the registered check for `op` on seeded random inputs.
pub fn grad_check(op: GradOp, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = op.name();
    match op {
        GradOp::Linear => {
            let inputs = [
                random(&[3, 5], &mut rng, 1.0),
                random(&[5, 4], &mut rng, 0.5),
                random(&[4], &mut rng, 0.5),
            ];
            check_gradients(name, &inputs, tolerance, |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, seed)
            })
        }
        GradOp::Attention => {
            let inputs = [
                random(&[2, 3, 8], &mut rng, 1.0),
                random(&[2, 3, 8], &mut rng, 1.0),
                random(&[2, 3, 8], &mut rng, 1.0),
            ];
            check_gradients(name, &inputs, tolerance, |t, v| {
                let y = nn::attention_block(t, v[0], v[1], v[2], 2)?;
                project(t, y, seed)
            })
        }
        GradOp::Mlp => {
            let d = 6;
            let inputs = [
                random(&[4, d], &mut rng, 1.0),
                random(&[d, 4 * d], &mut rng, 0.4),
                random(&[4 * d], &mut rng, 0.2),
                random(&[4 * d, d], &mut rng, 0.4),
                random(&[d], &mut rng, 0.2),
            ];
            check_gradients(name, &inputs, tolerance, |t, v| {
                let w = MlpVars {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                let y = nn::mlp_block(t, v[0], w)?;
                project(t, y, seed)
            })
        }
        GradOp::LayerNorm => {
            let inputs = [
                random(&[3, 7], &mut rng, 2.0),
                random(&[7], &mut rng, 1.0),
                random(&[7], &mut rng, 1.0),
            ];
            check_gradients(name, &inputs, tolerance, |t, v| {
                let y = nn::layer_norm(t, v[0], v[1], v[2])?;
                project(t, y, seed)
            })
        }
        GradOp::ResidualAdd => {
            let inputs = [random(&[2, 5], &mut rng, 1.0), random(&[2, 5], &mut rng, 1.0)];
            check_gradients(name, &inputs, tolerance, |t, v| {
                let y = nn::residual_add(t, v[0], v[1], 6)?;
                project(t, y, seed)
            })
        }
        GradOp::Gelu | GradOp::Sigmoid | GradOp::Tanh => {
            let inputs = [random(&[3, 4], &mut rng, 3.0)];
            check_gradients(name, &inputs, tolerance, |t, v| {
                let y = match op {
                    GradOp::Gelu => t.gelu(v[0]),
                    GradOp::Sigmoid => t.sigmoid(v[0]),
                    _ => t.tanh(v[0]),
                };
                project(t, y, seed)
            })
        }
        GradOp::Rho => {
            let x = random(&[1, 3, 8], &mut rng, 1.0);
            let mats: Arc<[[f64; 16]]> = (0..3)
                .map(|_| {
                    let mut m = [0.0; 16];
                    m.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
                    m
                })
                .collect();
            check_gradients(name, &[x], tolerance, move |t, v| {
                let y = t.rho(v[0], mats.clone())?;
                project(t, y, seed)
            })
        }
        GradOp::Gather => {
            let x = random(&[4, 3], &mut rng, 1.0);
            let index: Arc<[usize]> = Arc::from(vec![2, 0, 2, 3, 1]);
            check_gradients(name, &[x], tolerance, move |t, v| {
                let y = t.gather(v[0], 3, index.clone(), &[5, 3])?;
                project(t, y, seed)
            })
        }
        GradOp::Concat => {
            let inputs = [random(&[2, 2, 3], &mut rng, 1.0), random(&[2, 1, 3], &mut rng, 1.0)];
            check_gradients(name, &inputs, tolerance, |t, v| {
                let y = t.concat_tokens(&[v[0], v[1]])?;
                project(t, y, seed)
            })
        }
        GradOp::Mse => {
            let inputs = [random(&[2, 6], &mut rng, 1.0), random(&[2, 6], &mut rng, 1.0)];
            check_gradients(name, &inputs, tolerance, |t, v| t.mse(v[0], v[1]))
        }
        GradOp::Conv2d => {
            let x = random(&[2, 5, 4, 3], &mut rng, 1.0);
            let w = Arc::new(random(&[3, 3, 3, 4], &mut rng, 0.5));
            check_gradients(name, &[x], tolerance, move |t, v| {
                let y = t.conv2d_frozen(v[0], w.clone(), 2, 1)?;
                project(t, y, seed)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes() {
        for op in GradOp::ALL {
            for seed in 0..3 {
                let r = grad_check(op, seed, 1e-5).unwrap();
                assert!(r.passed, "{} seed {seed}: rel err {:e}", r.name, r.max_rel_err);
            }
        }
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx sum(x^3) computed as if it were sum(x^2): must fail the check.
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let fake = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            let xv = t.value(v[0]).clone();
            let c = t.constant(xv);
            let cube = t.mul(sq, c)?;
            Ok(t.sum(cube))
        };
        let r = check_gradients("cube", &[x], 1e-5, fake).unwrap();
        assert!(!r.passed);
    }
}
