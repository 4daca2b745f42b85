//! Geometric augmentation applied identically to every modality and the
//! label map.

use rand::Rng;

use crate::data::ModalitySample;
use crate::head::SegmentationMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub rotate: bool,
    pub scale: bool,
}

impl AugmentFlags {
    pub const NONE: Self = Self {
        hflip: false,
        rotate: false,
        scale: false,
    };
}

/// One sample's transform: optional horizontal flip, then a rotation by
/// `quarter_turns * 90` degrees counter-clockwise, then a rescale by
/// `scale` with a centre crop or pad back to the original size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub quarter_turns: u8,
    pub scale: f64,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self {
        hflip: false,
        quarter_turns: 0,
        scale: 1.0,
    };

    /// Always consumes the same three draws so that the stream position
    /// does not depend on `flags`. Odd quarter turns are only drawn for
    /// square inputs.
    pub fn sample<R: Rng>(rng: &mut R, flags: AugmentFlags, square: bool) -> Self {
        let flip = rng.random_bool(0.5);
        let turns: u8 = rng.random_range(0..4);
        let scale = rng.random_range(0.75..=1.25);
        Self {
            hflip: flags.hflip && flip,
            quarter_turns: match (flags.rotate, square) {
                (false, _) => 0,
                (true, true) => turns,
                (true, false) => turns & 2,
            },
            scale: if flags.scale { scale } else { 1.0 },
        }
    }
}

/// Index map for one output grid: `src[out_px] = Some(in_px)` or `None`
/// for padding.
fn pixel_map(h: usize, w: usize, d: &AugmentDraw) -> (usize, usize, Vec<Option<usize>>) {
    // rotated extent
    let (rh, rw) = if d.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    let sh = ((rh as f64) * d.scale).round().max(1.0) as usize;
    let sw = ((rw as f64) * d.scale).round().max(1.0) as usize;
    // centre crop (negative) or pad (positive) offsets
    let oy = rh as isize - sh as isize;
    let ox = rw as isize - sw as isize;
    let (oy, ox) = (oy.div_euclid(2), ox.div_euclid(2));

    let map = (0..rh * rw)
        .map(|i| {
            let (y, x) = ((i / rw) as isize - oy, (i % rw) as isize - ox);
            if y < 0 || x < 0 || y >= sh as isize || x >= sw as isize {
                return None;
            }
            // nearest-neighbour source in the rotated grid
            let ry = ((y as usize * 2 + 1) * rh / (2 * sh)).min(rh - 1);
            let rx = ((x as usize * 2 + 1) * rw / (2 * sw)).min(rw - 1);
            // undo the rotation: (ry, rx) in the rotated grid came from (fy, fx)
            let (fy, fx) = match d.quarter_turns % 4 {
                0 => (ry, rx),
                1 => (rx, w - 1 - ry),
                2 => (h - 1 - ry, w - 1 - rx),
                _ => (h - 1 - rx, ry),
            };
            let fx = if d.hflip { w - 1 - fx } else { fx };
            Some(fy * w + fx)
        })
        .collect();
    (rh, rw, map)
}

fn warp_image(t: &Tensor, rh: usize, rw: usize, map: &[Option<usize>]) -> Tensor {
    let s = t.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let x = t.data();
    let ohw = rh * rw;
    Tensor::from_fn(&[c, rh, rw], |i| {
        let (ch, px) = (i / ohw, i % ohw);
        map[px].map_or(0.0, |src| x[ch * hw + src])
    })
}

pub fn apply(sample: &ModalitySample, d: &AugmentDraw, ignore: u8) -> ModalitySample {
    let (h, w) = (sample.height(), sample.width());
    let (rh, rw, map) = pixel_map(h, w, d);
    let images = sample.images.iter().map(|t| warp_image(t, rh, rw, &map)).collect();
    let data = map
        .iter()
        .map(|src| src.map_or(ignore, |s| sample.label.data[s]))
        .collect();
    ModalitySample {
        images,
        label: SegmentationMap {
            height: rh,
            width: rw,
            data,
        },
    }
}

/// Draws a transform from `rng` and applies it.
pub fn augment<R: Rng>(sample: &ModalitySample, rng: &mut R, flags: AugmentFlags, ignore: u8) -> ModalitySample {
    let d = AugmentDraw::sample(rng, flags, sample.height() == sample.width());
    apply(sample, &d, ignore)
}
