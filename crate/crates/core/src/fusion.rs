//! Per-stage multimodal fusion.
//!
//! A fusion block treats every modality identically: the `M` stage features
//! are channel-concatenated and linearly reduced back to `C` channels, then
//! refined by two parallel multiscale branches whose outputs are summed:
//!
//! * pyramidal pooling: 1x1 projection, adaptive average pooling to each
//!   `k x k` grid, a 1x1 conv per grid, bilinear upsampling back, sum, and a
//!   closing 1x1 conv;
//! * pyramidal convolution: 1x1 projection, depthwise `k x k` convolutions
//!   (3/5/7), each added to the projection as a residual, sum, and a closing
//!   1x1 conv.
//!
//! A pointwise linear layer and squeeze-and-excitation channel attention
//! finish the block. The only parameter that distinguishes modalities is
//! the column block of the reduction weight that reads each modality.

use crate::autodiff::{Bound, Tape, Var};
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvInit, Linear};
use crate::param::ParamBuilder;

/// Channel-concat followed by a pointwise `M*C -> C` linear layer.
#[derive(Debug, Clone)]
pub struct ConcatReduce {
    /// Weight `[C, M*C, 1, 1]`; input-channel block `m` reads modality `m`.
    pub proj: Conv2d,
    pub modalities: usize,
}

impl ConcatReduce {
    pub fn new(pb: &mut ParamBuilder<'_>, modalities: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::pointwise(pb, "reduce", modalities * channels, channels, ConvInit::Linear)?,
            modalities,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, feats: &[Var]) -> Result<Var> {
        check_modalities(t, feats, self.modalities)?;
        let x = if feats.len() == 1 {
            feats[0]
        } else {
            t.concat(feats, 1)?
        };
        self.proj.forward(t, p, x)
    }
}

fn check_modalities(t: &Tape, feats: &[Var], expected: usize) -> Result<()> {
    let first = feats.first().ok_or(Error::Fusion {
        modality: 0,
        msg: "no modality features supplied".into(),
    })?;
    if feats.len() != expected {
        return Err(Error::Fusion {
            modality: feats.len().min(expected),
            msg: format!("expected {expected} modalities, got {}", feats.len()),
        });
    }
    let base = t.shape(*first).to_vec();
    if base.len() != 4 {
        return Err(Error::Fusion {
            modality: 0,
            msg: format!("feature must be [B,C,H,W], got {base:?}"),
        });
    }
    for (m, f) in feats.iter().enumerate().skip(1) {
        if t.shape(*f) != base.as_slice() {
            return Err(Error::Fusion {
                modality: m,
                msg: format!("shape {:?} differs from modality 0 shape {base:?}", t.shape(*f)),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PyramidPool {
    pub proj: Conv2d,
    /// `(grid size, 1x1 conv)` per pooling branch.
    pub branches: Vec<(usize, Conv2d)>,
    pub out: Conv2d,
}

impl PyramidPool {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, bins: &[usize]) -> Result<Self> {
        let proj = Conv2d::pointwise(pb, "proj", channels, channels, ConvInit::FanIn)?;
        let branches = bins
            .iter()
            .map(|&k| {
                Ok((
                    k,
                    Conv2d::pointwise(pb, &format!("bin{k}"), channels, channels, ConvInit::FanIn)?,
                ))
            })
            .collect::<Result<_>>()?;
        let out = Conv2d::pointwise(pb, "out", channels, channels, ConvInit::FanIn)?;
        Ok(Self { proj, branches, out })
    }

    /// Sum of the upsampled pooling branches, before the closing conv.
    pub fn branches_sum(&self, t: &mut Tape, p: &Bound, f: Var) -> Result<Var> {
        let s = t.shape(f).to_vec();
        let (h, w) = (s[2], s[3]);
        if let Some(&(k, _)) = self.branches.iter().find(|(k, _)| *k > h.min(w)) {
            return Err(Error::Config(format!(
                "pooling grid {k} exceeds the {h}x{w} feature map"
            )));
        }
        let proj = self.proj.forward(t, p, f)?;
        let mut acc: Option<Var> = None;
        for (k, conv) in &self.branches {
            let pooled = t.adaptive_avg_pool2d(proj, *k)?;
            let y = conv.forward(t, p, pooled)?;
            let up = t.bilinear_upsample(y, h, w)?;
            acc = Some(match acc {
                Some(a) => t.add(a, up)?,
                None => up,
            });
        }
        acc.ok_or_else(|| Error::Config("pyramid pooling without branches".into()))
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, f: Var) -> Result<Var> {
        let y = self.branches_sum(t, p, f)?;
        self.out.forward(t, p, y)
    }
}

#[derive(Debug, Clone)]
pub struct PyramidConv {
    pub proj: Conv2d,
    /// Depthwise `k x k` convolution per branch.
    pub branches: Vec<Conv2d>,
    pub out: Conv2d,
}

impl PyramidConv {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, kernels: &[usize]) -> Result<Self> {
        if let Some(k) = kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("pyramid conv kernel {k} must be odd")));
        }
        let proj = Conv2d::pointwise(pb, "proj", channels, channels, ConvInit::FanIn)?;
        let branches = kernels
            .iter()
            .map(|&k| Conv2d::depthwise(pb, &format!("k{k}"), channels, k))
            .collect::<Result<_>>()?;
        let out = Conv2d::pointwise(pb, "out", channels, channels, ConvInit::FanIn)?;
        Ok(Self { proj, branches, out })
    }

    /// `sum_k (F_proj + DWConv_k(F_proj))`, before the closing conv.
    pub fn branches_sum(&self, t: &mut Tape, p: &Bound, f: Var) -> Result<Var> {
        let proj = self.proj.forward(t, p, f)?;
        let mut acc: Option<Var> = None;
        for conv in &self.branches {
            let y = conv.forward(t, p, proj)?;
            let term = t.add(proj, y)?;
            acc = Some(match acc {
                Some(a) => t.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::Config("pyramid convolution without branches".into()))
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, f: Var) -> Result<Var> {
        let y = self.branches_sum(t, p, f)?;
        self.out.forward(t, p, y)
    }
}

/// Squeeze-and-excitation gate: global average pool, bottleneck MLP with
/// ReLU, sigmoid, channel-wise rescale.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "channel attention: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(pb, "fc1", channels, hidden)?,
            fc2: Linear::new(pb, "fc2", hidden, channels)?,
        })
    }

    /// Gate values `[B, C, 1, 1]` in `(0, 1)`.
    pub fn gate(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        let squeezed = t.adaptive_avg_pool2d(x, 1)?;
        let z = t.reshape(squeezed, &[s[0], s[1]])?;
        let z = self.fc1.forward(t, p, z)?;
        let z = t.relu(z)?;
        let z = self.fc2.forward(t, p, z)?;
        let g = t.sigmoid(z)?;
        t.reshape(g, &[s[0], s[1], 1, 1])
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let g = self.gate(t, p, x)?;
        t.mul(x, g)
    }
}

/// One stage's fusion block.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub reduce: ConcatReduce,
    pub pool: PyramidPool,
    pub conv: PyramidConv,
    pub linear: Conv2d,
    pub ca: ChannelAttention,
}

impl FusionBlock {
    /// `bins` are the pooling grids that fit this stage's feature map.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        modalities: usize,
        channels: usize,
        bins: &[usize],
        cfg: &FusionConfig,
    ) -> Result<Self> {
        if modalities == 0 {
            return Err(Error::Config("fusion needs at least one modality".into()));
        }
        let reduce = ConcatReduce::new(pb, modalities, channels)?;
        let pool = {
            let mut s = pb.sub("pool");
            PyramidPool::new(&mut s, channels, bins)?
        };
        let conv = {
            let mut s = pb.sub("conv");
            PyramidConv::new(&mut s, channels, &cfg.conv_kernels)?
        };
        let linear = Conv2d::pointwise(pb, "linear", channels, channels, ConvInit::Linear)?;
        let ca = {
            let mut s = pb.sub("ca");
            ChannelAttention::new(&mut s, channels, cfg.ca_reduction)?
        };
        Ok(Self {
            reduce,
            pool,
            conv,
            linear,
            ca,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, feats: &[Var]) -> Result<Var> {
        let reduced = self.reduce.forward(t, p, feats)?;
        let pooled = self.pool.forward(t, p, reduced)?;
        let convolved = self.conv.forward(t, p, reduced)?;
        let fused = t.add(pooled, convolved)?;
        let y = self.linear.forward(t, p, fused)?;
        self.ca.forward(t, p, y)
    }
}
