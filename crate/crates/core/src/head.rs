//! Shared all-MLP segmentation head.

use crate::autodiff::{Bound, Tape, Var};
use crate::config::{HeadConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvInit};
use crate::param::ParamBuilder;

/// Per-pixel class indices of one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "segmentation map {height}x{width} needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.width + c] = v;
    }
}

/// Per-stage projection to a common width, upsampling to the stage-1 grid,
/// concatenation, a fusing linear layer, a classifier, and a final bilinear
/// upsample of the logits to the input resolution.
#[derive(Debug, Clone)]
pub struct SegmentationHead {
    pub stage_proj: Vec<Conv2d>,
    pub fuse: Conv2d,
    pub classify: Conv2d,
    pub cfg: HeadConfig,
}

impl SegmentationHead {
    pub fn new(pb: &mut ParamBuilder<'_>, stage_channels: &[usize; NUM_STAGES], cfg: &HeadConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let stage_proj = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::pointwise(pb, &format!("proj{}", i + 1), c, d, ConvInit::Linear))
            .collect::<Result<_>>()?;
        Ok(Self {
            stage_proj,
            fuse: Conv2d::pointwise(pb, "fuse", NUM_STAGES * d, d, ConvInit::Linear)?,
            classify: Conv2d::pointwise(pb, "cls", d, cfg.num_classes, ConvInit::Linear)?,
            cfg: cfg.clone(),
        })
    }

    /// Pointwise projection of stage `i` (0-based) to the decoder width.
    pub fn stage_project(&self, t: &mut Tape, p: &Bound, i: usize, f: Var) -> Result<Var> {
        self.stage_proj[i].forward(t, p, f)
    }

    /// Logits `[B, N, H, W]` at the full input resolution `full_hw`.
    ///
    /// Computes `fuse(concat_i(up(proj_i(F_i))))`, but applies each
    /// stage's column block of the fusing weight before upsampling. A 1x1
    /// conv commutes with bilinear resizing (whose taps sum to one), so the
    /// result is the same while the wide layer runs at stage resolution.
    pub fn decode(&self, t: &mut Tape, p: &Bound, stages: &[Var; NUM_STAGES], full_hw: (usize, usize)) -> Result<Var> {
        let (h, w) = full_hw;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("input {h}x{w} is not divisible by 4")));
        }
        let (qh, qw) = (h / 4, w / 4);
        let d = self.cfg.decoder_dim;
        let mut acc: Option<Var> = None;
        for (i, &f) in stages.iter().enumerate() {
            let s = t.shape(f).to_vec();
            let factor = 1 << i;
            if s.len() != 4 || s[2] * factor != qh || s[3] * factor != qw {
                return Err(Error::shape(format!(
                    "stage {} feature {s:?} is not at 1/{} of {h}x{w}",
                    i + 1,
                    4 * factor
                )));
            }
            let y = self.stage_project(t, p, i, f)?;
            let w_i = t.narrow(p[self.fuse.w], 1, i * d, d)?;
            let z = t.conv2d(y, w_i, None, 1, 0, 1)?;
            let up = if i == 0 { z } else { t.bilinear_upsample(z, qh, qw)? };
            acc = Some(match acc {
                Some(a) => t.add(a, up)?,
                None => up,
            });
        }
        let fused = acc.expect("four stages");
        let bias = t.reshape(p[self.fuse.b], &[1, d, 1, 1])?;
        let fused = t.add(fused, bias)?;
        let logits = self.classify.forward(t, p, fused)?;
        t.bilinear_upsample(logits, h, w)
    }

    /// Reference form of [`decode`](Self::decode): upsample every projected
    /// stage, concatenate, then fuse.
    pub fn decode_concat(
        &self,
        t: &mut Tape,
        p: &Bound,
        stages: &[Var; NUM_STAGES],
        full_hw: (usize, usize),
    ) -> Result<Var> {
        let (h, w) = full_hw;
        let (qh, qw) = (h / 4, w / 4);
        let mut ups = Vec::with_capacity(NUM_STAGES);
        for (i, &f) in stages.iter().enumerate() {
            let y = self.stage_project(t, p, i, f)?;
            ups.push(t.bilinear_upsample(y, qh, qw)?);
        }
        let cat = t.concat(&ups, 1)?;
        let fused = self.fuse.forward(t, p, cat)?;
        let logits = self.classify.forward(t, p, fused)?;
        t.bilinear_upsample(logits, h, w)
    }
}

/// Per-pixel argmax over the class axis of `[B, N, H, W]` logits. Ties go to
/// the lowest class index.
pub fn predict_labels(logits: &crate::tensor::Tensor) -> Result<Vec<SegmentationMap>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::shape(format!("predict_labels expects [B,N>=2,H,W], got {s:?}")));
    }
    let (b, n, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let x = logits.data();
    Ok((0..b)
        .map(|bi| {
            let data = (0..hw)
                .map(|px| {
                    let mut best = 0;
                    let mut best_v = x[bi * n * hw + px];
                    for c in 1..n {
                        let v = x[(bi * n + c) * hw + px];
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    best as u8
                })
                .collect();
            SegmentationMap {
                height: h,
                width: w,
                data,
            }
        })
        .collect())
}
