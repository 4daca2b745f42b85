//! Dataset directories: `root/<split>/<sample>/mod<k>.ppm` (or `.pgm` for
//! single-channel modalities) plus `label.pgm`.

use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::data::ModalitySample;
use crate::error::{Error, Result};
use crate::head::SegmentationMap;
use crate::io::netpbm::{self, Image};
use crate::tensor::Tensor;

pub const LABEL_FILE: &str = "label.pgm";

fn modality_path(dir: &Path, m: usize) -> Option<PathBuf> {
    ["ppm", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("mod{m}.{ext}")))
        .find(|p| p.is_file())
}

fn sample_err(dir: &Path, e: Error) -> Error {
    match e {
        Error::Io { .. } => e,
        other => Error::Data(format!("sample {}: {other}", dir.display())),
    }
}

fn next32(n: usize) -> usize {
    n.div_ceil(32) * 32
}

/// Pads `[C, H, W]` at the bottom and right by replicating the last row and
/// column.
fn pad_edge(t: &Tensor, ph: usize, pw: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let x = t.data();
    Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, r, col) = (i / (ph * pw), (i / pw) % ph, i % pw);
        x[(ch * h + r.min(h - 1)) * w + col.min(w - 1)]
    })
}

fn pad_label(l: &SegmentationMap, ph: usize, pw: usize, ignore: u8) -> SegmentationMap {
    let mut out = SegmentationMap::filled(ph, pw, ignore);
    for r in 0..l.height {
        out.data[r * pw..r * pw + l.width].copy_from_slice(&l.data[r * l.width..(r + 1) * l.width]);
    }
    out
}

/// Reads the `M` modality images of one sample directory, checking channel
/// counts against `cfg.in_channels`. Returns `[C_m, H, W]` tensors before
/// any padding.
pub fn load_images(dir: &Path, cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    let mut images = Vec::with_capacity(cfg.modalities());
    for (m, &c) in cfg.in_channels.iter().enumerate() {
        let path = modality_path(dir, m)
            .ok_or_else(|| Error::Data(format!("sample {}: missing mod{m}.ppm", dir.display())))?;
        let img = netpbm::read_file(&path).map_err(|e| sample_err(dir, e))?;
        if img.channels != c {
            return Err(Error::Data(format!(
                "sample {}: modality {m} has {} channels, config expects {c}",
                dir.display(),
                img.channels
            )));
        }
        if let Some(first) = images.first() {
            let first: &Tensor = first;
            if first.shape()[1..] != [img.height, img.width] {
                return Err(Error::Data(format!(
                    "sample {}: modality {m} is {}x{}, modality 0 is {}x{}",
                    dir.display(),
                    img.height,
                    img.width,
                    first.shape()[1],
                    first.shape()[2]
                )));
            }
        }
        images.push(img.to_tensor());
    }
    Ok(images)
}

/// Pads `images` (and `label`) up to multiples of 32 when the config allows
/// it; otherwise rejects non-multiple sizes.
pub fn fit_to_32(dir: &Path, cfg: &ModelConfig, images: Vec<Tensor>, label: SegmentationMap) -> Result<ModalitySample> {
    let (h, w) = (label.height, label.width);
    let (ph, pw) = (next32(h), next32(w));
    if (ph, pw) == (h, w) {
        return ModalitySample::new(images, label).map_err(|e| sample_err(dir, e));
    }
    if !cfg.data.pad_to_32 {
        return Err(Error::Data(format!(
            "sample {}: {h}x{w} is not a multiple of 32 (set pad_to_32 = true)",
            dir.display()
        )));
    }
    let images = images.iter().map(|t| pad_edge(t, ph, pw)).collect();
    let label = pad_label(&label, ph, pw, cfg.train.ignore_index);
    ModalitySample::new(images, label).map_err(|e| sample_err(dir, e))
}

pub fn load_label(dir: &Path, cfg: &ModelConfig) -> Result<SegmentationMap> {
    let img = netpbm::read_file(&dir.join(LABEL_FILE)).map_err(|e| sample_err(dir, e))?;
    if img.channels != 1 {
        return Err(Error::Data(format!("sample {}: label must be a PGM", dir.display())));
    }
    let (n, ignore) = (cfg.head.num_classes, cfg.train.ignore_index);
    if let Some(i) = img.data.iter().position(|&v| v != ignore && usize::from(v) >= n) {
        return Err(Error::Data(format!(
            "sample {}: label {} at pixel ({}, {}) is outside 0..{n}",
            dir.display(),
            img.data[i],
            i / img.width,
            i % img.width
        )));
    }
    SegmentationMap::new(img.height, img.width, img.data)
}

pub fn load_sample_dir(dir: &Path, cfg: &ModelConfig) -> Result<ModalitySample> {
    let images = load_images(dir, cfg)?;
    let label = load_label(dir, cfg)?;
    let s = images[0].shape();
    if (s[1], s[2]) != (label.height, label.width) {
        return Err(Error::Data(format!(
            "sample {}: label is {}x{}, images are {}x{}",
            dir.display(),
            label.height,
            label.width,
            s[1],
            s[2]
        )));
    }
    fit_to_32(dir, cfg, images, label)
}

/// Loads every sample directory of `root/split`, in name order.
pub fn load_dataset_dir(root: &Path, split: &str, cfg: &ModelConfig) -> Result<Vec<ModalitySample>> {
    let dir = root.join(split);
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data(format!("{} contains no sample directories", dir.display())));
    }
    entries.iter().map(|d| load_sample_dir(d, cfg)).collect()
}

/// Writes samples as `root/split/sample_NNNN/`. Values are quantised to
/// bytes; 3-channel modalities become PPM, 1-channel ones PGM.
pub fn write_dataset_dir(root: &Path, split: &str, samples: &[ModalitySample]) -> Result<()> {
    let dir = root.join(split);
    for (i, s) in samples.iter().enumerate() {
        let sd = dir.join(format!("sample_{i:04}"));
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for (m, img) in s.images.iter().enumerate() {
            let img = Image::from_tensor(img)?;
            let ext = if img.channels == 1 { "pgm" } else { "ppm" };
            netpbm::write_file(&sd.join(format!("mod{m}.{ext}")), &img)?;
        }
        let label = Image::new(s.width(), s.height(), 1, s.label.data.clone())?;
        netpbm::write_file(&sd.join(LABEL_FILE), &label)?;
    }
    Ok(())
}
