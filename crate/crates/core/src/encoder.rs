//! Hierarchical mix-transformer encoder, one instance per modality.
//!
//! Each of the four stages runs an overlapping patch embedding (7/4/3 for
//! stage 1, 3/2/1 afterwards), `depth` pre-norm transformer blocks with
//! spatial-reduction attention and a Mix-FFN, and a closing layer norm. The
//! stage outputs sit at 1/4, 1/8, 1/16 and 1/32 of the input resolution.

use crate::autodiff::{Bound, Tape, Var};
use crate::config::{EncoderConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::layers::{map_to_tokens, tokens_to_map, Conv2d, ConvInit, LayerNorm, Linear};
use crate::param::ParamBuilder;

/// The four stage feature maps `[B, C_i, H/4*2^-(i-1), W/...]`.
#[derive(Debug, Clone, Copy)]
pub struct StagePyramid {
    pub features: [Var; NUM_STAGES],
}

/// Overlapping patch embedding: strided convolution then a channel norm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(pb, "proj", c_in, c_out, kernel, stride, 1, ConvInit::FanIn)?,
            norm: LayerNorm::new(pb, "norm", c_out)?,
        })
    }

    /// Returns normalised tokens `[B, N, C]` and the output grid size.
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<(Var, usize, usize)> {
        let s = t.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(self.proj.stride) || !s[3].is_multiple_of(self.proj.stride) {
            return Err(Error::shape(format!(
                "patch embedding with stride {} needs divisible extents, got {s:?}",
                self.proj.stride
            )));
        }
        let y = self.proj.forward(t, p, x)?;
        let ys = t.shape(y).to_vec();
        let tokens = map_to_tokens(t, y)?;
        let tokens = self.norm.forward(t, p, tokens)?;
        Ok((tokens, ys[2], ys[3]))
    }

    /// Same as [`forward`](Self::forward) but returns a `[B, C, H', W']` map.
    pub fn forward_map(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (tokens, h, w) = self.forward(t, p, x)?;
        tokens_to_map(t, tokens, h, w)
    }
}

/// Shortens a `[B, N, C]` sequence by `ratio`: consecutive groups of `ratio`
/// tokens are flattened to `[B, N/ratio, C*ratio]`, projected back to `C`,
/// then normalised.
pub fn spatial_reduce(t: &mut Tape, p: &Bound, x: Var, ratio: usize, proj: &Linear, norm: &LayerNorm) -> Result<Var> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 || ratio == 0 || !s[1].is_multiple_of(ratio) {
        return Err(Error::shape(format!(
            "spatial reduction by {ratio} needs a token count divisible by it, got {s:?}"
        )));
    }
    let grouped = t.reshape(x, &[s[0], s[1] / ratio, s[2] * ratio])?;
    let y = proj.forward(t, p, grouped)?;
    norm.forward(t, p, y)
}

/// Multi-head self-attention with spatially reduced keys and values.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// Reduction projection and norm, present when `ratio > 1`.
    pub sr: Option<(Linear, LayerNorm)>,
    pub heads: usize,
    pub ratio: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{dim} channels not divisible by {heads} heads")));
        }
        let sr = if ratio > 1 {
            Some((
                Linear::new(pb, "sr", dim * ratio, dim)?,
                LayerNorm::new(pb, "sr_norm", dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(pb, "wq", dim, dim)?,
            // a key bias only shifts each query's scores by a constant, which
            // the softmax cancels
            k: Linear::without_bias(pb, "wk", dim, dim)?,
            v: Linear::new(pb, "wv", dim, dim)?,
            out: Linear::new(pb, "wo", dim, dim)?,
            sr,
            heads,
            ratio,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.forward_with_weights(t, p, x).map(|(y, _)| y)
    }

    /// Returns the output and the `[B, h, N, N/R]` attention weights.
    pub fn forward_with_weights(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = t.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("attention expects [B,N,C], got {s:?}")));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dk = c / h;

        let kv_src = match &self.sr {
            Some((proj, norm)) => spatial_reduce(t, p, x, self.ratio, proj, norm)?,
            None => x,
        };
        let nr = t.shape(kv_src)[1];

        let q = self.q.forward(t, p, x)?;
        let q = t.reshape(q, &[b, n, h, dk])?;
        let q = t.permute(q, &[0, 2, 1, 3])?;
        let k = self.k.forward(t, p, kv_src)?;
        let k = t.reshape(k, &[b, nr, h, dk])?;
        let kt = t.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(t, p, kv_src)?;
        let v = t.reshape(v, &[b, nr, h, dk])?;
        let v = t.permute(v, &[0, 2, 1, 3])?;

        let scores = t.matmul(q, kt)?;
        let scores = t.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let weights = t.softmax(scores, 3)?;
        let ctx = t.matmul(weights, v)?;
        let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = t.reshape(ctx, &[b, n, c])?;
        let y = self.out.forward(t, p, ctx)?;
        Ok((y, weights))
    }
}

/// `MLP2(GELU(DWConv3x3(MLP1(x))))` plus the residual input.
#[derive(Debug, Clone)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dw: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(pb, "fc1", dim, hidden)?,
            dw: Conv2d::depthwise(pb, "dw", hidden, 3)?,
            fc2: Linear::new(pb, "fc2", hidden, dim)?,
        })
    }

    /// The branch without the residual.
    pub fn body(&self, t: &mut Tape, p: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = t.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::shape(format!(
                "mix-ffn: tokens {s:?} do not match a {h}x{w} grid"
            )));
        }
        let y = self.fc1.forward(t, p, x)?;
        let y = tokens_to_map(t, y, h, w)?;
        let y = self.dw.forward(t, p, y)?;
        let y = map_to_tokens(t, y)?;
        let y = t.gelu(y)?;
        self.fc2.forward(t, p, y)
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.body(t, p, x, h, w)?;
        t.add(y, x)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl Block {
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.norm1.forward(t, p, x)?;
        let y = self.attn.forward(t, p, y)?;
        let x = t.add(x, y)?;
        let y = self.norm2.forward(t, p, x)?;
        let y = self.ffn.body(t, p, y, h, w)?;
        t.add(x, y)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<Stage>,
    pub in_channels: usize,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, cfg: &EncoderConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut c_prev = in_channels;
        for i in 0..NUM_STAGES {
            let c = cfg.stage_channels[i];
            let mut sp = pb.sub(format!("stage{}", i + 1));
            let embed = {
                let mut e = sp.sub("patch");
                PatchEmbed::new(&mut e, c_prev, c, cfg.patch_sizes[i], cfg.patch_strides[i])?
            };
            let mut blocks = Vec::with_capacity(cfg.stage_depths[i]);
            for j in 0..cfg.stage_depths[i] {
                let mut bp = sp.sub(format!("block{j}"));
                let norm1 = LayerNorm::new(&mut bp, "norm1", c)?;
                let attn = {
                    let mut ap = bp.sub("attn");
                    Attention::new(&mut ap, c, cfg.heads[i], cfg.sr_ratios[i])?
                };
                let norm2 = LayerNorm::new(&mut bp, "norm2", c)?;
                let ffn = {
                    let mut fp = bp.sub("ffn");
                    MixFfn::new(&mut fp, c, c * cfg.mlp_ratio)?
                };
                blocks.push(Block {
                    norm1,
                    attn,
                    norm2,
                    ffn,
                });
            }
            let norm = LayerNorm::new(&mut sp, "norm", c)?;
            stages.push(Stage { embed, blocks, norm });
            c_prev = c;
        }
        Ok(Self { stages, in_channels })
    }

    /// Runs one stage on a `[B, C, H, W]` map and returns the next map.
    pub fn forward_stage(&self, t: &mut Tape, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let stage = &self.stages[i];
        let (mut tokens, h, w) = stage.embed.forward(t, p, x)?;
        for block in &stage.blocks {
            tokens = block.forward(t, p, tokens, h, w)?;
        }
        let tokens = stage.norm.forward(t, p, tokens)?;
        tokens_to_map(t, tokens, h, w)
    }

    pub fn encode(&self, t: &mut Tape, p: &Bound, image: Var) -> Result<StagePyramid> {
        let s = t.shape(image).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(format!(
                "encoder expects [B,{},H,W], got {s:?}",
                self.in_channels
            )));
        }
        if !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) {
            return Err(Error::shape(format!(
                "encoder input {}x{} not divisible by 32",
                s[2], s[3]
            )));
        }
        let mut x = image;
        let mut features = [image; NUM_STAGES];
        for (i, f) in features.iter_mut().enumerate() {
            x = self.forward_stage(t, p, i, x)?;
            *f = x;
        }
        Ok(StagePyramid { features })
    }
}
