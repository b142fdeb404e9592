//! Transformer building blocks expressed on the tape.

use super::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the lab.
pub const LN_EPS: f64 = 1e-5;

/// Softmax attention over pre-projected `q [B, n_q, d]`, `k, v [B, n_kv, d]`.
pub fn attention_block<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    tape.attention(q, k, v, heads)
}

/// Weights of a two-layer perceptron.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `linear -> GELU -> linear`; the hidden width is carried by the weights.
pub fn mlp_block<T: Scalar>(tape: &mut Tape<T>, x: Var, w: MlpVars) -> Result<Var> {
    let h = tape.linear(x, w.w1, Some(w.b1))?;
    let h = tape.gelu(h);
    tape.linear(h, w.w2, Some(w.b2))
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    tape.layer_norm(x, gain, bias, T::of(LN_EPS))
}

/// `x + f_x / sqrt(depth)`.
pub fn residual_add<T: Scalar>(tape: &mut Tape<T>, x: Var, f_x: Var, depth: usize) -> Result<Var> {
    if depth == 0 {
        return Err(Error::config("residual depth must be at least 1"));
    }
    let scale = T::one() / T::of(depth as f64).sqrt();
    tape.add_scaled(x, f_x, scale)
}
