//! FLOP accounting for every model family.
//!
//! Two conventions are available. `Paper` uses the constants `4 n^2 d` for
//! attention and `16 n d^2` for the MLP plus projections of a self-attention
//! layer. `Exact` counts the concrete operator shapes of this crate's blocks:
//! four `d x d` projections and a two-layer MLP at `mlp_ratio`, at two FLOPs
//! per multiply-add, which gives `(8 + 4 r) n d^2`. Token embeddings, the
//! output head and norms are excluded under both conventions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Family, ModelConfig};

/// Forward plus two backward passes.
pub const DEFAULT_BACKWARD_MULTIPLIER: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMode {
    Paper,
    Exact,
}

impl FromStr for FlopMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "paper_constant" => Ok(FlopMode::Paper),
            "exact" => Ok(FlopMode::Exact),
            _ => Err(Error::config(format!("unknown FLOP mode '{s}' (paper|exact)"))),
        }
    }
}

impl fmt::Display for FlopMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopMode::Paper => "paper",
            FlopMode::Exact => "exact",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub attn: u128,
    pub mlp_proj: u128,
    pub mode: FlopMode,
    pub backward_multiplier: u32,
}

impl FlopsBreakdown {
    pub fn zero(mode: FlopMode) -> Self {
        FlopsBreakdown {
            attn: 0,
            mlp_proj: 0,
            mode,
            backward_multiplier: 1,
        }
    }

    pub fn total(&self) -> u128 {
        (self.attn + self.mlp_proj) * self.backward_multiplier as u128
    }

    /// Multiplies both terms by an integer factor.
    pub fn times(self, k: u128) -> Self {
        FlopsBreakdown {
            attn: self.attn * k,
            mlp_proj: self.mlp_proj * k,
            ..self
        }
    }

    pub fn plus(self, other: Self) -> Self {
        debug_assert_eq!(self.mode, other.mode);
        FlopsBreakdown {
            attn: self.attn + other.attn,
            mlp_proj: self.mlp_proj + other.mlp_proj,
            ..self
        }
    }

    pub fn with_backward(self, multiplier: u32) -> Self {
        FlopsBreakdown {
            backward_multiplier: multiplier,
            ..self
        }
    }
}

/// Token counts of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TokenCounts {
    pub per_view: u128,
    /// Decoder-only sequence length `(V_C + 1) hw`.
    pub n: u128,
    pub n_enc: u128,
    pub n_dec: u128,
}

impl TokenCounts {
    pub fn new(vc: usize, vt: usize, height: usize, width: usize, patch: usize) -> Self {
        let hw = ((height / patch) * (width / patch)) as u128;
        TokenCounts {
            per_view: hw,
            n: (vc as u128 + 1) * hw,
            n_enc: vc as u128 * hw,
            n_dec: vt as u128 * hw,
        }
    }
}

/// One self-attention layer over `n` tokens of width `d`, MLP ratio 4.
pub fn self_attn_layer_flops(n: u128, d: u128, mode: FlopMode) -> FlopsBreakdown {
    self_attn_layer_flops_with(n, d, mode, 4)
}

pub fn self_attn_layer_flops_with(n: u128, d: u128, mode: FlopMode, mlp_ratio: u128) -> FlopsBreakdown {
    let mlp_proj = match mode {
        FlopMode::Paper => 16 * n * d * d,
        FlopMode::Exact => (8 + 4 * mlp_ratio) * n * d * d,
    };
    FlopsBreakdown {
        attn: 4 * n * n * d,
        mlp_proj,
        mode,
        backward_multiplier: 1,
    }
}

/// One cross-attention layer: `n_q` queries over `n_kv` keys, MLP ratio 4.
pub fn cross_attn_layer_flops(n_q: u128, n_kv: u128, d: u128, mode: FlopMode) -> FlopsBreakdown {
    cross_attn_layer_flops_with(n_q, n_kv, d, mode, 4)
}

/// In exact mode the key/value projections are charged once per `n_kv`
/// token, query/output projections and the MLP once per query token.
pub fn cross_attn_layer_flops_with(n_q: u128, n_kv: u128, d: u128, mode: FlopMode, mlp_ratio: u128) -> FlopsBreakdown {
    let mlp_proj = match mode {
        FlopMode::Paper => 16 * n_q * d * d,
        FlopMode::Exact => (4 + 4 * mlp_ratio) * n_q * d * d + 4 * n_kv * d * d,
    };
    FlopsBreakdown {
        attn: 4 * n_q * n_kv * d,
        mlp_proj,
        mode,
        backward_multiplier: 1,
    }
}

fn layers(k: usize, layer: FlopsBreakdown) -> FlopsBreakdown {
    layer.times(k as u128)
}

/// Encoder cost for one scene with `vc` context views.
pub fn encoder_flops(c: &ModelConfig, vc: usize, height: usize, width: usize, mode: FlopMode) -> FlopsBreakdown {
    let t = TokenCounts::new(vc, 0, height, width, c.patch_size);
    let r = c.mlp_ratio as u128;
    let de = c.enc_dim as u128;
    let n_fixed = c.fixed_latent_tokens as u128;
    match c.family {
        Family::LvsmDec => FlopsBreakdown::zero(mode),
        Family::SvsmEncdec => layers(c.enc_layers, self_attn_layer_flops_with(t.n_enc, de, mode, r)),
        Family::SvsmFixed => layers(c.enc_layers, cross_attn_layer_flops_with(n_fixed, t.n_enc, de, mode, r)),
        Family::LvsmEncdec => layers(c.enc_layers, self_attn_layer_flops_with(t.n_enc + n_fixed, de, mode, r)),
    }
}

/// Cost of rendering `vt` targets of one scene, given its encoding.
pub fn decoder_flops(c: &ModelConfig, vc: usize, vt: usize, height: usize, width: usize, mode: FlopMode) -> FlopsBreakdown {
    if vt == 0 {
        return FlopsBreakdown::zero(mode);
    }
    let t = TokenCounts::new(vc, vt, height, width, c.patch_size);
    let r = c.mlp_ratio as u128;
    let dd = c.dec_dim as u128;
    let n_z = c.latent_tokens(vc, height, width) as u128;
    match c.family {
        Family::LvsmDec => layers(c.dec_layers, self_attn_layer_flops_with(t.n, dd, mode, r)).times(vt as u128),
        Family::SvsmEncdec | Family::SvsmFixed => {
            layers(c.dec_layers, cross_attn_layer_flops_with(t.n_dec, n_z, dd, mode, r))
        }
        Family::LvsmEncdec => {
            layers(c.dec_layers, self_attn_layer_flops_with(n_z + t.per_view, dd, mode, r)).times(vt as u128)
        }
    }
}

/// Forward FLOPs for one training example (one scene, `vc` contexts, `vt` targets).
pub fn forward_flops(c: &ModelConfig, vc: usize, vt: usize, height: usize, width: usize, mode: FlopMode) -> FlopsBreakdown {
    encoder_flops(c, vc, height, width, mode).plus(decoder_flops(c, vc, vt, height, width, mode))
}

/// Training FLOPs after `steps` steps at `batch` scenes per step.
#[allow(clippy::too_many_arguments)]
pub fn train_flops(
    c: &ModelConfig,
    vc: usize,
    vt: usize,
    batch: usize,
    steps: u64,
    height: usize,
    width: usize,
    mode: FlopMode,
    backward_multiplier: u32,
) -> Result<u128> {
    if backward_multiplier < 1 {
        return Err(Error::config("backward multiplier must be at least 1"));
    }
    let f = forward_flops(c, vc, vt, height, width, mode);
    Ok(f.with_backward(backward_multiplier).total() * batch as u128 * steps as u128)
}

/// Per-scene part of the decoder: key/value projections of the latent,
/// which a cross-attention decoder computes once and caches. Zero in paper
/// mode, which never charges them.
pub fn latent_kv_flops(c: &ModelConfig, vc: usize, height: usize, width: usize, mode: FlopMode) -> u128 {
    match (c.family, mode) {
        (Family::SvsmEncdec | Family::SvsmFixed, FlopMode::Exact) => {
            let n_z = c.latent_tokens(vc, height, width) as u128;
            let dd = c.dec_dim as u128;
            c.dec_layers as u128 * 4 * n_z * dd * dd
        }
        _ => 0,
    }
}

/// Rendering cost of one target frame with the scene encoding, including
/// any cached latent keys and values, amortized away.
pub fn per_frame_render_flops(c: &ModelConfig, vc: usize, height: usize, width: usize, mode: FlopMode) -> FlopsBreakdown {
    let mut f = decoder_flops(c, vc, 1, height, width, mode);
    f.mlp_proj -= latent_kv_flops(c, vc, height, width, mode);
    f
}
