//! Parameterised building blocks shared by the encoder, fusion blocks and head.

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamBuilder, ParamId, LINEAR_INIT_STD};

pub const NORM_EPS: f64 = 1e-6;

/// Token-wise linear map `x @ w + b` with `w: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            w: s.trunc_normal("w", &[d_in, d_out], LINEAR_INIT_STD)?,
            b: Some(s.zeros("b", &[d_out])?),
        })
    }

    pub fn without_bias(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            w: s.trunc_normal("w", &[d_in, d_out], LINEAR_INIT_STD)?,
            b: None,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = t.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => t.add(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Layer norm over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            gamma: s.ones("g", &[dim])?,
            beta: s.zeros("b", &[dim])?,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        t.layer_norm(x, p[self.gamma], p[self.beta], NORM_EPS)
    }
}

/// How a convolution's weights are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvInit {
    /// `N(0, 2 / fan_in)`, for genuine spatial/projection convolutions.
    FanIn,
    /// Truncated normal, for 1x1 convolutions that act as channel-wise linear
    /// layers.
    Linear,
}

/// 2-D convolution with bias over `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        init: ConvInit,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{name}: {c_in}->{c_out} channels incompatible with {groups} groups"
            )));
        }
        let shape = [c_out, c_in / groups, kernel, kernel];
        let fan_in = c_in / groups * kernel * kernel;
        let mut s = pb.sub(name);
        let w = match init {
            ConvInit::FanIn => s.fan_in_normal("w", &shape, fan_in)?,
            ConvInit::Linear => s.trunc_normal("w", &shape, LINEAR_INIT_STD)?,
        };
        let b = s.zeros("b", &[c_out])?;
        Ok(Self {
            w,
            b,
            kernel,
            stride,
            pad: kernel / 2,
            groups,
        })
    }

    /// 1x1 channel mixing.
    pub fn pointwise(pb: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize, init: ConvInit) -> Result<Self> {
        Self::new(pb, name, c_in, c_out, 1, 1, 1, init)
    }

    /// Depthwise `k x k`, stride 1, "same" padding.
    pub fn depthwise(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        Self::new(pb, name, channels, channels, kernel, 1, channels, ConvInit::FanIn)
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        t.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad, self.groups)
    }
}

/// `[B, C, H, W]` feature map to `[B, H*W, C]` tokens.
pub fn map_to_tokens(t: &mut Tape, x: Var) -> Result<Var> {
    let s = t.shape(x).to_vec();
    let flat = t.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    t.permute(flat, &[0, 2, 1])
}

/// `[B, H*W, C]` tokens back to a `[B, C, H, W]` feature map.
pub fn tokens_to_map(t: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape(format!("tokens {s:?} do not form a {h}x{w} map")));
    }
    let chw = t.permute(x, &[0, 2, 1])?;
    t.reshape(chw, &[s[0], s[2], h, w])
}
