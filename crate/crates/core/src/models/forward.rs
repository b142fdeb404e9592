//! Model weights and the forward passes of every family.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{training_loss, PerceptualNet, PERCEPTUAL_WEIGHT};
use super::params::{BlockIdx, Layout, LinearIdx, NormIdx, ParamKind, ParamSpec};
use super::tokens::{unpatchify, ContextBatch, TargetBatch};
use super::{Family, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{prope_attention_prepared, prope_keys_values, TokenFrames};
use crate::scenegen::Image;
use crate::tensor::nn::{self, MlpVars};
use crate::tensor::{truncated_normal, Checkpoint, FlopCounter, Scalar, Tape, Tensor, Var};

/// Standard deviation of every initialized weight matrix.
pub const INIT_STD: f64 = 0.02;

/// Work counters, shared by all inference and training calls on a model.
#[derive(Debug, Default)]
pub struct Counters {
    encoded_scenes: AtomicU64,
    full_passes: AtomicU64,
    decoded_targets: AtomicU64,
}

impl Counters {
    /// Scenes pushed through the encoder.
    pub fn encoded_scenes(&self) -> u64 {
        self.encoded_scenes.load(Ordering::Relaxed)
    }

    /// Per-target passes through a full self-attention stack.
    pub fn full_passes(&self) -> u64 {
        self.full_passes.load(Ordering::Relaxed)
    }

    /// Target views produced by any decoder.
    pub fn decoded_targets(&self) -> u64 {
        self.decoded_targets.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.encoded_scenes.store(0, Ordering::Relaxed);
        self.full_passes.store(0, Ordering::Relaxed);
        self.decoded_targets.store(0, Ordering::Relaxed);
    }
}

/// Encoded scene tokens, reusable across any number of decode calls.
#[derive(Clone, Debug)]
pub struct SceneLatent<T> {
    /// `[B, n_z, dec_dim]`.
    pub z: Tensor<T>,
    /// Camera frame of each latent token (identity for learned latents).
    pub frames: TokenFrames<T>,
    /// Per decoder layer, the keys and values of `z`, already in their
    /// attention frame. Filled for cross-attention decoders only.
    pub kv: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> SceneLatent<T> {
    pub fn tokens(&self) -> usize {
        self.z.shape()[1]
    }
}

struct LatentVar<T> {
    z: Var,
    frames: TokenFrames<T>,
}

/// Where a block's keys and values come from.
#[derive(Clone, Copy)]
enum KvSource {
    /// The block's own normalized input.
    SelfAttention,
    /// Tokens to project with the block's key/value weights.
    Tokens(Var),
    /// Keys and values projected (and frame-transformed) earlier.
    Cached(Var, Var),
}

#[derive(Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
    counters: Counters,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            counters: Counters::default(),
        }
    }
}

/// Runs `f` with FLOP counting paused (embeddings, projections and heads are
/// outside the accounting convention).
fn uncounted<T: Scalar, R>(tape: &mut Tape<T>, f: impl FnOnce(&mut Tape<T>) -> R) -> R {
    let was = tape.set_counting(false);
    let r = f(tape);
    tape.set_counting(was);
    r
}

/// Indices that repeat each of `batch` blocks `times` times.
fn repeat_index(batch: usize, times: usize) -> Arc<[usize]> {
    (0..batch).flat_map(|b| std::iter::repeat_n(b, times)).collect()
}

/// Token indices of the last `tail` tokens of each of `items` sequences of
/// length `len`.
fn tail_index(items: usize, len: usize, tail: usize) -> Arc<[usize]> {
    (0..items)
        .flat_map(|i| (len - tail..len).map(move |t| i * len + t))
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized weights: truncated normal matrices, zero biases,
    /// unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .specs
            .iter()
            .map(|s| match s.kind {
                ParamKind::Weight | ParamKind::Latent => truncated_normal(&s.shape, INIT_STD, &mut rng),
                ParamKind::NormGain => Tensor::full(&s.shape, T::one()),
                ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Model {
            config,
            layout,
            params,
            counters: Counters::default(),
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len() {
            return Err(Error::dim(format!(
                "{} parameter tensors for a layout of {}",
                params.len(),
                layout.specs.len()
            )));
        }
        for (s, p) in layout.specs.iter().zip(&params) {
            if p.shape() != s.shape.as_slice() {
                return Err(Error::dim(format!("{}: expected {:?}, got {:?}", s.name, s.shape, p.shape())));
            }
        }
        Ok(Model {
            config,
            layout,
            params,
            counters: Counters::default(),
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Number of trainable scalars actually allocated.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn decay_exempt(&self) -> Vec<bool> {
        self.layout.specs.iter().map(|s| s.decay_exempt).collect()
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            tensors: self
                .layout
                .specs
                .iter()
                .zip(&self.params)
                .map(|(s, p)| (s.name.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(config: ModelConfig, ckpt: Checkpoint<T>) -> Result<Self> {
        let layout = Layout::new(&config);
        for ((name, _), spec) in ckpt.tensors.iter().zip(&layout.specs) {
            if *name != spec.name {
                return Err(Error::config(format!(
                    "checkpoint tensor '{name}' where '{}' was expected",
                    spec.name
                )));
            }
        }
        Self::from_params(config, ckpt.tensors.into_iter().map(|(_, t)| t).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            counters: Counters::default(),
        }
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn depth(&self, layers: usize) -> usize {
        if self.config.residual_scale {
            layers
        } else {
            1
        }
    }

    fn linear(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, l: LinearIdx) -> Result<Var> {
        tape.linear(x, vars[l.w], Some(vars[l.b]))
    }

    fn norm(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, n: NormIdx) -> Result<Var> {
        nn::layer_norm(tape, x, vars[n.g], vars[n.b])
    }

    fn mlp_tail(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, blk: &BlockIdx, depth: usize) -> Result<Var> {
        let h = self.norm(tape, vars, x, blk.ln2)?;
        let m = nn::mlp_block(
            tape,
            h,
            MlpVars {
                w1: vars[blk.fc1.w],
                b1: vars[blk.fc1.b],
                w2: vars[blk.fc2.w],
                b2: vars[blk.fc2.b],
            },
        )?;
        nn::residual_add(tape, x, m, depth)
    }

    /// Pre-norm attention + MLP block; queries come from `x`.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        blk: &BlockIdx,
        x: Var,
        kv: KvSource,
        frames: Option<(&TokenFrames<T>, &TokenFrames<T>)>,
        dim: usize,
        depth: usize,
    ) -> Result<Var> {
        let heads = dim / self.config.head_dim;
        let h = self.norm(tape, vars, x, blk.ln1)?;
        let q = self.linear(tape, vars, h, blk.q)?;
        let (k, v) = match kv {
            KvSource::Cached(k, v) => (k, v),
            KvSource::SelfAttention => self.keys_values(tape, vars, blk, h, frames.map(|f| f.1))?,
            KvSource::Tokens(src) => self.keys_values(tape, vars, blk, src, frames.map(|f| f.1))?,
        };
        let a = match frames {
            Some((fq, _)) => prope_attention_prepared(tape, q, k, v, fq, heads)?,
            None => nn::attention_block(tape, q, k, v, heads)?,
        };
        let a = self.linear(tape, vars, a, blk.o)?;
        let x = nn::residual_add(tape, x, a, depth)?;
        self.mlp_tail(tape, vars, x, blk, depth)
    }

    /// Projected keys and values of `src`, moved into the attention frame
    /// when `frames` is given.
    fn keys_values(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        blk: &BlockIdx,
        src: Var,
        frames: Option<&TokenFrames<T>>,
    ) -> Result<(Var, Var)> {
        let k = self.linear(tape, vars, src, blk.k)?;
        let v = self.linear(tape, vars, src, blk.v)?;
        match frames {
            Some(f) => prope_keys_values(tape, k, v, f),
            None => Ok((k, v)),
        }
    }

    fn head(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.norm(tape, vars, x, self.layout.head_norm)?;
        let y = uncounted(tape, |t| self.linear(t, vars, h, self.layout.head))?;
        Ok(tape.sigmoid(y))
    }

    /// Learned latent array broadcast over the batch.
    fn latent_array(&self, tape: &mut Tape<T>, vars: &[Var], batch: usize) -> Result<Var> {
        let idx = self.layout.latents.expect("fixed-latent family");
        let (n, d) = (self.config.fixed_latent_tokens, self.config.enc_dim);
        tape.gather(vars[idx], n * d, repeat_index(1, batch), &[batch, n, d])
    }

    /// Final encoder norm, optional width projection and optional pose tokens.
    fn finish_latent(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        frames: TokenFrames<T>,
        ctx: &ContextBatch<T>,
    ) -> Result<LatentVar<T>> {
        let mut z = self.norm(tape, vars, x, self.layout.enc_norm.expect("encoder family"))?;
        if let Some(p) = self.layout.enc_proj {
            z = uncounted(tape, |t| self.linear(t, vars, z, p))?;
        }
        let mut frames = frames;
        if let Some(pe) = self.layout.pose_embed {
            let rays = tape.constant(ctx.rays.clone());
            let r = uncounted(tape, |t| self.linear(t, vars, rays, pe))?;
            let n_z = tape.shape(z)[1];
            let n_c = ctx.views * ctx.tokens_per_view();
            z = tape.concat_tokens(&[z, r])?;
            frames = TokenFrames::interleave(&frames, n_z, &ctx.frames, n_c);
        }
        Ok(LatentVar { z, frames })
    }

    fn encode_vars(&self, tape: &mut Tape<T>, vars: &[Var], ctx: &ContextBatch<T>) -> Result<LatentVar<T>> {
        let c = &self.config;
        let (b, de) = (ctx.batch, c.enc_dim);
        let n_ctx = ctx.views * ctx.tokens_per_view();
        let prope = c.prope_mode.encoder();
        let depth = self.depth(c.enc_layers);
        let tokens = tape.constant(ctx.tokens.clone());
        let x = uncounted(tape, |t| self.linear(t, vars, tokens, self.layout.ctx_embed))?;
        let latent = match c.family {
            Family::SvsmEncdec => {
                let mut x = x;
                for blk in &self.layout.enc_blocks {
                    let f = prope.then_some((&ctx.frames, &ctx.frames));
                    x = self.block(tape, vars, blk, x, KvSource::SelfAttention, f, de, depth)?;
                }
                self.finish_latent(tape, vars, x, ctx.frames.clone(), ctx)?
            }
            Family::SvsmFixed => {
                let n_z = c.fixed_latent_tokens;
                let ident = TokenFrames::identity(b * n_z);
                let mut lat = self.latent_array(tape, vars, b)?;
                for blk in &self.layout.enc_blocks {
                    let f = prope.then_some((&ident, &ctx.frames));
                    lat = self.block(tape, vars, blk, lat, KvSource::Tokens(x), f, de, depth)?;
                }
                self.finish_latent(tape, vars, lat, ident, ctx)?
            }
            Family::LvsmEncdec => {
                let n_z = c.fixed_latent_tokens;
                let ident = TokenFrames::identity(b * n_z);
                let joint_frames = TokenFrames::interleave(&ctx.frames, n_ctx, &ident, n_z);
                let lat = self.latent_array(tape, vars, b)?;
                let mut x = tape.concat_tokens(&[x, lat])?;
                for blk in &self.layout.enc_blocks {
                    let f = prope.then_some((&joint_frames, &joint_frames));
                    x = self.block(tape, vars, blk, x, KvSource::SelfAttention, f, de, depth)?;
                }
                let lat = tape.gather(x, de, tail_index(b, n_ctx + n_z, n_z), &[b, n_z, de])?;
                self.finish_latent(tape, vars, lat, ident, ctx)?
            }
            Family::LvsmDec => return Err(Error::config("lvsm_dec has no encoder")),
        };
        self.counters.encoded_scenes.fetch_add(b as u64, Ordering::Relaxed);
        Ok(latent)
    }

    fn decode_vars(&self, tape: &mut Tape<T>, vars: &[Var], latent: &LatentVar<T>, tgt: &TargetBatch<T>) -> Result<Var> {
        self.decode_cached(tape, vars, latent, &[], tgt)
    }

    /// Decoder pass; `cache` holds per-layer keys and values of `z` for the
    /// cross-attention families and may be empty.
    fn decode_cached(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        latent: &LatentVar<T>,
        cache: &[(Var, Var)],
        tgt: &TargetBatch<T>,
    ) -> Result<Var> {
        let c = &self.config;
        let dd = c.dec_dim;
        let (b, vt, hw) = (tgt.batch, tgt.views, tgt.tokens_per_view());
        let z_shape = tape.shape(latent.z).to_vec();
        if z_shape[0] != b {
            return Err(Error::dim(format!(
                "latent holds {} scenes, targets {b}",
                z_shape[0]
            )));
        }
        let n_z = z_shape[1];
        let prope = c.prope_mode.decoder();
        let depth = self.depth(c.dec_layers);
        let tokens = tape.constant(tgt.tokens.clone());
        let mut t = uncounted(tape, |tp| self.linear(tp, vars, tokens, self.layout.tgt_embed))?;
        match c.family {
            Family::SvsmEncdec | Family::SvsmFixed => {
                for (i, blk) in self.layout.dec_blocks.iter().enumerate() {
                    let f = prope.then_some((&tgt.frames, &latent.frames));
                    let kv = match cache.get(i) {
                        Some(&(k, v)) => KvSource::Cached(k, v),
                        None => KvSource::Tokens(latent.z),
                    };
                    t = self.block(tape, vars, blk, t, kv, f, dd, depth)?;
                }
            }
            Family::LvsmEncdec => {
                let items = b * vt;
                let t_items = tape.reshape(t, &[items, hw, dd])?;
                let zr = tape.gather(latent.z, n_z * dd, repeat_index(b, vt), &[items, n_z, dd])?;
                let mut x = tape.concat_tokens(&[zr, t_items])?;
                let zf = latent.frames.select(&replicated_tokens(b, vt, n_z));
                let frames = TokenFrames::interleave(&zf, n_z, &tgt.frames, hw);
                for blk in &self.layout.dec_blocks {
                    let f = prope.then_some((&frames, &frames));
                    x = self.block(tape, vars, blk, x, KvSource::SelfAttention, f, dd, depth)?;
                }
                let tail = tape.gather(x, dd, tail_index(items, n_z + hw, hw), &[items, hw, dd])?;
                t = tape.reshape(tail, &[b, vt * hw, dd])?;
                self.counters.full_passes.fetch_add(items as u64, Ordering::Relaxed);
            }
            Family::LvsmDec => return Err(Error::config("lvsm_dec has no separate decoder")),
        }
        self.counters.decoded_targets.fetch_add((b * vt) as u64, Ordering::Relaxed);
        self.head(tape, vars, t)
    }

    fn lvsm_vars(&self, tape: &mut Tape<T>, vars: &[Var], ctx: &ContextBatch<T>, tgt: &TargetBatch<T>) -> Result<Var> {
        let c = &self.config;
        let dd = c.dec_dim;
        let (b, vt, hw) = (tgt.batch, tgt.views, tgt.tokens_per_view());
        if ctx.batch != b || ctx.tokens_per_view() != hw {
            return Err(Error::dim("context and target batches disagree"));
        }
        let n_ctx = ctx.views * hw;
        let items = b * vt;
        let ctx_tokens = tape.constant(ctx.tokens.clone());
        let tgt_tokens = tape.constant(tgt.tokens.clone());
        let (xc, xt) = uncounted(tape, |tp| -> Result<(Var, Var)> {
            Ok((
                self.linear(tp, vars, ctx_tokens, self.layout.ctx_embed)?,
                self.linear(tp, vars, tgt_tokens, self.layout.tgt_embed)?,
            ))
        })?;
        let xc = tape.gather(xc, n_ctx * dd, repeat_index(b, vt), &[items, n_ctx, dd])?;
        let xt = tape.reshape(xt, &[items, hw, dd])?;
        let mut x = tape.concat_tokens(&[xc, xt])?;
        let frames = c.lvsm_prope().then(|| {
            let cf = ctx.frames.select(&replicated_tokens(b, vt, n_ctx));
            TokenFrames::interleave(&cf, n_ctx, &tgt.frames, hw)
        });
        let depth = self.depth(c.dec_layers);
        for blk in &self.layout.dec_blocks {
            let f = frames.as_ref().map(|f| (f, f));
            x = self.block(tape, vars, blk, x, KvSource::SelfAttention, f, dd, depth)?;
        }
        let tail = tape.gather(x, dd, tail_index(items, n_ctx + hw, hw), &[items, hw, dd])?;
        let t = tape.reshape(tail, &[b, vt * hw, dd])?;
        self.counters.full_passes.fetch_add(items as u64, Ordering::Relaxed);
        self.counters.decoded_targets.fetch_add(items as u64, Ordering::Relaxed);
        self.head(tape, vars, t)
    }

    /// Predicted target patches `[B, V_T hw, 3p^2]` on `tape`.
    pub fn predict_on(&self, tape: &mut Tape<T>, vars: &[Var], ctx: &ContextBatch<T>, tgt: &TargetBatch<T>) -> Result<Var> {
        if ctx.batch != tgt.batch {
            return Err(Error::dim(format!(
                "{} context scenes vs {} target scenes",
                ctx.batch, tgt.batch
            )));
        }
        match self.config.family {
            Family::LvsmDec => self.lvsm_vars(tape, vars, ctx, tgt),
            _ => {
                let latent = self.encode_vars(tape, vars, ctx)?;
                self.decode_vars(tape, vars, &latent, tgt)
            }
        }
    }

    /// Reconstruction loss of the supervised targets in `tgt`.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ctx: &ContextBatch<T>,
        tgt: &TargetBatch<T>,
        net: &PerceptualNet<T>,
    ) -> Result<Var> {
        let gt = tgt
            .images
            .clone()
            .ok_or_else(|| Error::config("target batch carries no images"))?;
        let pred = self.predict_on(tape, vars, ctx, tgt)?;
        let gt = tape.constant(gt);
        let geom = (tgt.batch * tgt.views, tgt.height, tgt.width, tgt.patch);
        uncounted(tape, |t| training_loss(t, pred, gt, geom, T::of(PERCEPTUAL_WEIGHT), net))
    }

    /// Encodes context views once; the result serves any number of decodes.
    pub fn encode(&self, ctx: &ContextBatch<T>) -> Result<SceneLatent<T>> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let l = self.encode_vars(&mut tape, &vars, ctx)?;
        let mut kv = Vec::new();
        if matches!(self.config.family, Family::SvsmEncdec | Family::SvsmFixed) {
            let frames = self.config.prope_mode.decoder().then_some(&l.frames);
            for blk in &self.layout.dec_blocks {
                let (k, v) = self.keys_values(&mut tape, &vars, blk, l.z, frames)?;
                kv.push((tape.value(k).clone(), tape.value(v).clone()));
            }
        }
        Ok(SceneLatent {
            z: tape.value(l.z).clone(),
            frames: l.frames,
            kv,
        })
    }

    /// Decodes target patches from a stored latent.
    pub fn decode(&self, latent: &SceneLatent<T>, tgt: &TargetBatch<T>) -> Result<Tensor<T>> {
        Ok(self.decode_counted(latent, tgt)?.0)
    }

    /// [`Model::decode`] together with the FLOPs counted on the way.
    pub fn decode_counted(&self, latent: &SceneLatent<T>, tgt: &TargetBatch<T>) -> Result<(Tensor<T>, FlopCounter)> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let z = tape.constant(latent.z.clone());
        let l = LatentVar {
            z,
            frames: latent.frames.clone(),
        };
        let cache: Vec<(Var, Var)> = latent
            .kv
            .iter()
            .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
            .collect();
        let out = self.decode_cached(&mut tape, &vars, &l, &cache, tgt)?;
        Ok((tape.value(out).clone(), tape.flops()))
    }

    /// Decoder-only forward pass: one full pass per target.
    pub fn forward_lvsm_dec(&self, ctx: &ContextBatch<T>, tgt: &TargetBatch<T>) -> Result<Tensor<T>> {
        if self.config.family != Family::LvsmDec {
            return Err(Error::config(format!("{} is not decoder-only", self.config.family)));
        }
        self.render(ctx, tgt)
    }

    /// Predicted target patches for any family.
    pub fn render(&self, ctx: &ContextBatch<T>, tgt: &TargetBatch<T>) -> Result<Tensor<T>> {
        Ok(self.render_counted(ctx, tgt)?.0)
    }

    pub fn render_counted(&self, ctx: &ContextBatch<T>, tgt: &TargetBatch<T>) -> Result<(Tensor<T>, FlopCounter)> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let out = self.predict_on(&mut tape, &vars, ctx, tgt)?;
        Ok((tape.value(out).clone(), tape.flops()))
    }

    /// Splits predicted patches into images, scene-major then target order.
    pub fn to_images(&self, patches: &Tensor<T>, height: usize, width: usize) -> Result<Vec<Image>> {
        let per = height * width * 3;
        patches
            .data()
            .chunks_exact(per)
            .map(|c| {
                let v: Vec<f32> = c.iter().map(|x| x.as_f64() as f32).collect();
                unpatchify(&v, height, width, self.config.patch_size)
            })
            .collect()
    }
}

/// Token indices replicating each scene's `n` tokens once per target.
fn replicated_tokens(batch: usize, vt: usize, n: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (0..vt).flat_map(move |_| (0..n).map(move |i| b * n + i)))
        .collect()
}
