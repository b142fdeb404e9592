//! The four view-synthesis transformer families.
//!
//! * `lvsm_dec`: decoder-only. Context tokens and the tokens of one target
//!   view self-attend jointly; every target is a full pass.
//! * `svsm_encdec`: the context is encoded once into a latent `z` with one
//!   token per context patch; target tokens read `z` through cross-attention
//!   only, so targets never see each other.
//! * `svsm_fixed`: like `svsm_encdec`, but `z` is a learned, fixed-size token
//!   array that reads the context through cross-attention.
//! * `lvsm_encdec`: learned latent tokens self-attend jointly with the
//!   context; each target then self-attends jointly with the latent.

mod forward;
mod loss;
mod params;
mod tokens;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{Counters, Model, SceneLatent};
pub use loss::{perceptual_features, training_loss, PerceptualNet, PERCEPTUAL_SEED, PERCEPTUAL_WEIGHT};
pub use params::{block_param_count, param_count, ParamKind, ParamSpec};
pub use tokens::{
    episode_batches, patchify, patchify_pixels, unpatchify, ContextBatch, RayFrame, TargetBatch, TokenizedView,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LvsmDec,
    SvsmEncdec,
    SvsmFixed,
    LvsmEncdec,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::LvsmDec, Family::SvsmEncdec, Family::SvsmFixed, Family::LvsmEncdec];

    pub fn has_encoder(self) -> bool {
        self != Family::LvsmDec
    }

    pub fn has_fixed_latent(self) -> bool {
        matches!(self, Family::SvsmFixed | Family::LvsmEncdec)
    }

    /// Whether every target is rendered by its own pass over shared tokens.
    pub fn per_target_passes(self) -> bool {
        matches!(self, Family::LvsmDec | Family::LvsmEncdec)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::LvsmDec => "lvsm_dec",
            Family::SvsmEncdec => "svsm_encdec",
            Family::SvsmFixed => "svsm_fixed",
            Family::LvsmEncdec => "lvsm_encdec",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "lvsm" | "lvsm_dec" => Ok(Family::LvsmDec),
            "svsm" | "svsm_encdec" => Ok(Family::SvsmEncdec),
            "svsm_fixed" => Ok(Family::SvsmFixed),
            "lvsm_encdec" => Ok(Family::LvsmEncdec),
            _ => Err(Error::config(format!("unknown model family '{s}'"))),
        }
    }
}

/// Where projective relative attention replaces plain attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropeMode {
    #[default]
    None,
    Encoder,
    Decoder,
    Both,
}

impl PropeMode {
    pub fn encoder(self) -> bool {
        matches!(self, PropeMode::Encoder | PropeMode::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, PropeMode::Decoder | PropeMode::Both)
    }
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    /// Ignored by `lvsm_dec`.
    #[serde(default)]
    pub enc_dim: usize,
    #[serde(default)]
    pub enc_layers: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub head_dim: usize,
    pub patch_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub prope_mode: PropeMode,
    /// Latent size of the fixed-latent families.
    #[serde(default)]
    pub fixed_latent_tokens: usize,
    /// Scale residual branches by `1/sqrt(L)` for a stack of depth `L`.
    #[serde(default = "default_true")]
    pub residual_scale: bool,
    /// Append context Plücker tokens to the scene latent.
    #[serde(default)]
    pub pose_concat: bool,
}

impl ModelConfig {
    /// Decoder-only model.
    pub fn lvsm(dim: usize, layers: usize, head_dim: usize, patch: usize) -> Self {
        ModelConfig {
            family: Family::LvsmDec,
            enc_dim: 0,
            enc_layers: 0,
            dec_dim: dim,
            dec_layers: layers,
            head_dim,
            patch_size: patch,
            mlp_ratio: 4,
            prope_mode: PropeMode::None,
            fixed_latent_tokens: 0,
            residual_scale: true,
            pose_concat: false,
        }
    }

    /// Encoder-decoder model with equal encoder and decoder widths.
    pub fn svsm(dim: usize, enc_layers: usize, dec_layers: usize, head_dim: usize, patch: usize) -> Self {
        ModelConfig {
            family: Family::SvsmEncdec,
            enc_dim: dim,
            enc_layers,
            ..Self::lvsm(dim, dec_layers, head_dim, patch)
        }
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn with_prope(mut self, mode: PropeMode) -> Self {
        self.prope_mode = mode;
        self
    }

    pub fn with_fixed_latent(mut self, tokens: usize) -> Self {
        self.fixed_latent_tokens = tokens;
        self
    }

    /// Width of context-token embeddings.
    pub fn context_dim(&self) -> usize {
        if self.family.has_encoder() {
            self.enc_dim
        } else {
            self.dec_dim
        }
    }

    /// How rays are expressed in token inputs. Camera-local rays carry no
    /// world-frame information, which keeps fully relative models invariant
    /// to the choice of world frame.
    pub fn ray_frame(&self) -> RayFrame {
        let relative = match self.family {
            Family::LvsmDec => self.prope_mode != PropeMode::None,
            _ => self.prope_mode == PropeMode::Both,
        };
        if relative {
            RayFrame::Camera
        } else {
            RayFrame::World
        }
    }

    /// Whether the decoder-only stack uses relative attention.
    pub(crate) fn lvsm_prope(&self) -> bool {
        self.prope_mode != PropeMode::None
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.head_dim == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return bad("head_dim, patch_size and mlp_ratio must be positive".into());
        }
        if self.dec_dim == 0 || self.dec_layers == 0 {
            return bad("decoder needs a positive width and depth".into());
        }
        let mut dims = vec![("dec_dim", self.dec_dim)];
        if self.family.has_encoder() {
            if self.enc_dim == 0 || self.enc_layers == 0 {
                return bad(format!("{} needs a positive encoder width and depth", self.family));
            }
            dims.push(("enc_dim", self.enc_dim));
        }
        for (name, d) in dims {
            if d % self.head_dim != 0 {
                return bad(format!("{name} {d} is not divisible by head_dim {}", self.head_dim));
            }
        }
        if self.prope_mode != PropeMode::None && !self.head_dim.is_multiple_of(4) {
            return bad(format!("PRoPE needs head_dim divisible by 4, got {}", self.head_dim));
        }
        if self.family.has_fixed_latent() && self.fixed_latent_tokens == 0 {
            return bad(format!("{} needs fixed_latent_tokens >= 1", self.family));
        }
        if self.family == Family::LvsmDec && self.pose_concat {
            return bad("pose_concat has no scene latent to extend in lvsm_dec".into());
        }
        Ok(())
    }

    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let p = self.patch_size;
        if height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::config(format!(
                "patch size {p} does not divide {height}x{width}"
            )));
        }
        Ok(())
    }

    /// Tokens per view.
    pub fn tokens_per_view(&self, height: usize, width: usize) -> usize {
        (height / self.patch_size) * (width / self.patch_size)
    }

    /// Size of the scene latent for `vc` context views (0 for `lvsm_dec`).
    pub fn latent_tokens(&self, vc: usize, height: usize, width: usize) -> usize {
        let hw = self.tokens_per_view(height, width);
        let base = match self.family {
            Family::LvsmDec => return 0,
            Family::SvsmEncdec => vc * hw,
            Family::SvsmFixed | Family::LvsmEncdec => self.fixed_latent_tokens,
        };
        base + if self.pose_concat { vc * hw } else { 0 }
    }
}

/// Desk-scale counterparts of the published size sweeps: widths divided by
/// 8 with 16-wide heads, depths and encoder/decoder splits unchanged.
pub fn presets(patch: usize) -> Vec<(&'static str, ModelConfig)> {
    let svsm = |enc: (usize, usize), dec: (usize, usize)| ModelConfig {
        enc_dim: enc.0 / 8,
        enc_layers: enc.1,
        dec_dim: dec.0 / 8,
        dec_layers: dec.1,
        ..ModelConfig::lvsm(dec.0 / 8, dec.1, 16, patch).with_family(Family::SvsmEncdec)
    };
    let lvsm = |dim: usize, layers: usize| ModelConfig::lvsm(dim / 8, layers, 16, patch);
    vec![
        ("stereo-svsm-15m", svsm((384, 3), (384, 3))),
        ("stereo-svsm-27m", svsm((384, 6), (384, 6))),
        ("stereo-svsm-35m", svsm((384, 8), (384, 8))),
        ("stereo-svsm-62m", svsm((512, 8), (384, 8))),
        ("stereo-svsm-79m", svsm((512, 8), (512, 12))),
        ("stereo-svsm-145m", svsm((640, 10), (640, 14))),
        ("stereo-svsm-226m", svsm((768, 10), (768, 16))),
        ("stereo-svsm-316m", svsm((768, 12), (768, 24))),
        ("stereo-svsm-420m", svsm((768, 16), (768, 32))),
        ("stereo-svsm-740m", svsm((1024, 16), (1024, 32))),
        ("stereo-lvsm-8m", lvsm(384, 3)),
        ("stereo-lvsm-13m", lvsm(384, 6)),
        ("stereo-lvsm-22m", lvsm(512, 6)),
        ("stereo-lvsm-28m", lvsm(512, 8)),
        ("stereo-lvsm-53m", lvsm(640, 10)),
        ("stereo-lvsm-90m", lvsm(768, 12)),
        ("stereo-lvsm-118m", lvsm(768, 16)),
        ("stereo-lvsm-175m", lvsm(768, 24)),
        ("stereo-lvsm-275m", lvsm(896, 28)),
        ("multiview-svsm-15m", svsm((384, 3), (384, 3))),
        ("multiview-svsm-32m", svsm((384, 6), (384, 8))),
        ("multiview-svsm-85m", svsm((512, 10), (512, 12))),
        ("multiview-svsm-168m", svsm((640, 12), (640, 16))),
        ("multiview-svsm-280m", svsm((768, 12), (768, 20))),
        ("multiview-svsm-711m", svsm((1024, 24), (1024, 24))),
        ("multiview-svsm-400m", svsm((768, 24), (768, 24))),
        ("multiview-lvsm-8m", lvsm(384, 3)),
        ("multiview-lvsm-22m", lvsm(512, 6)),
        ("multiview-lvsm-43m", lvsm(640, 10)),
        ("multiview-lvsm-90m", lvsm(768, 12)),
        ("multiview-lvsm-175m", lvsm(768, 24)),
        ("multiview-lvsm-383m", lvsm(1024, 30)),
    ]
}

pub fn preset(name: &str, patch: usize) -> Result<ModelConfig> {
    presets(patch)
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::config(format!("unknown preset '{name}'")))
}
