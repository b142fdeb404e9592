//! Parameter layout: every tensor a model allocates, in a fixed order.

use super::{Family, ModelConfig};

/// One allocated parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Excluded from weight decay (normalization gains and biases).
    pub decay_exempt: bool,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Latent,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIdx {
    pub ln1: NormIdx,
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub ln2: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub ctx_embed: LinearIdx,
    pub tgt_embed: LinearIdx,
    pub pose_embed: Option<LinearIdx>,
    pub latents: Option<usize>,
    pub enc_blocks: Vec<BlockIdx>,
    pub enc_norm: Option<NormIdx>,
    pub enc_proj: Option<LinearIdx>,
    pub dec_blocks: Vec<BlockIdx>,
    pub head_norm: NormIdx,
    pub head: LinearIdx,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        let decay_exempt = matches!(kind, ParamKind::NormGain | ParamKind::NormBias);
        self.specs.push(ParamSpec {
            name,
            shape,
            decay_exempt,
            kind,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(format!("{name}.w"), vec![d_in, d_out], ParamKind::Weight),
            b: self.push(format!("{name}.b"), vec![d_out], ParamKind::Bias),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        NormIdx {
            g: self.push(format!("{name}.g"), vec![d], ParamKind::NormGain),
            b: self.push(format!("{name}.b"), vec![d], ParamKind::NormBias),
        }
    }

    fn block(&mut self, name: &str, d: usize, ratio: usize) -> BlockIdx {
        BlockIdx {
            ln1: self.norm(&format!("{name}.ln1"), d),
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, ratio * d),
            fc2: self.linear(&format!("{name}.fc2"), ratio * d, d),
        }
    }
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Layout {
        let p2 = c.patch_size * c.patch_size;
        let (de, dd) = (c.context_dim(), c.dec_dim);
        let mut b = Builder { specs: Vec::new() };
        let ctx_embed = b.linear("ctx_embed", 9 * p2, de);
        let tgt_embed = b.linear("tgt_embed", 6 * p2, dd);
        let pose_embed = c.pose_concat.then(|| b.linear("pose_embed", 6 * p2, dd));
        let latents = c
            .family
            .has_fixed_latent()
            .then(|| b.push("latents".into(), vec![c.fixed_latent_tokens, de], ParamKind::Latent));
        let mut enc_blocks = Vec::new();
        let (mut enc_norm, mut enc_proj) = (None, None);
        if c.family.has_encoder() {
            enc_blocks = (0..c.enc_layers)
                .map(|i| b.block(&format!("enc.{i}"), de, c.mlp_ratio))
                .collect();
            enc_norm = Some(b.norm("enc_norm", de));
            if de != dd {
                enc_proj = Some(b.linear("enc_proj", de, dd));
            }
        }
        let dec_blocks = (0..c.dec_layers)
            .map(|i| b.block(&format!("dec.{i}"), dd, c.mlp_ratio))
            .collect();
        let head_norm = b.norm("head_norm", dd);
        let head = b.linear("head", dd, 3 * p2);
        Layout {
            specs: b.specs,
            ctx_embed,
            tgt_embed,
            pose_embed,
            latents,
            enc_blocks,
            enc_norm,
            enc_proj,
            dec_blocks,
            head_norm,
            head,
        }
    }

    #[cfg(test)]
    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}

/// Closed-form parameter count.
pub fn param_count(c: &ModelConfig) -> usize {
    let p2 = c.patch_size * c.patch_size;
    let r = c.mlp_ratio;
    let block = |d: usize| (4 + 2 * r) * d * d + (9 + r) * d;
    let (de, dd) = (c.context_dim(), c.dec_dim);
    let mut n = 9 * p2 * de + de + 6 * p2 * dd + dd;
    if c.pose_concat {
        n += 6 * p2 * dd + dd;
    }
    if c.family.has_fixed_latent() {
        n += c.fixed_latent_tokens * de;
    }
    if c.family != Family::LvsmDec {
        n += c.enc_layers * block(de) + 2 * de;
        if de != dd {
            n += de * dd + dd;
        }
    }
    n += c.dec_layers * block(dd);
    n + 2 * dd + dd * 3 * p2 + 3 * p2
}

/// Parameters of the transformer blocks alone.
pub fn block_param_count(c: &ModelConfig) -> usize {
    Layout::new(c)
        .specs
        .iter()
        .filter(|s| s.name.starts_with("enc.") || s.name.starts_with("dec."))
        .map(ParamSpec::numel)
        .sum()
}
