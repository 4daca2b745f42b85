//! Multimodal samples and batching.

use crate::error::{Error, Result};
use crate::head::SegmentationMap;
use crate::tensor::Tensor;

/// One scene: an image `[C_m, H, W]` per modality plus its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    pub images: Vec<Tensor>,
    pub label: SegmentationMap,
}

impl ModalitySample {
    pub fn new(images: Vec<Tensor>, label: SegmentationMap) -> Result<Self> {
        for (m, img) in images.iter().enumerate() {
            let s = img.shape();
            if s.len() != 3 || s[1] != label.height || s[2] != label.width {
                return Err(Error::Fusion {
                    modality: m,
                    msg: format!("image {s:?} does not match the {}x{} label", label.height, label.width),
                });
            }
        }
        Ok(Self { images, label })
    }

    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    pub fn modalities(&self) -> usize {
        self.images.len()
    }
}

/// Stacks samples into one `[B, C_m, H, W]` tensor per modality and the
/// concatenated `[B, H, W]` labels.
pub fn stack(samples: &[&ModalitySample]) -> Result<(Vec<Tensor>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::shape("cannot stack an empty batch"))?;
    let mut images = Vec::with_capacity(first.modalities());
    for m in 0..first.modalities() {
        let s = first.images[m].shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * first.images[m].numel());
        for (b, smp) in samples.iter().enumerate() {
            if smp.modalities() != first.modalities() || smp.images[m].shape() != s.as_slice() {
                return Err(Error::shape(format!(
                    "batch item {b} does not match item 0 in modality {m}"
                )));
            }
            data.extend_from_slice(smp.images[m].data());
        }
        images.push(Tensor::new(&[samples.len(), s[0], s[1], s[2]], data)?);
    }
    let labels = samples.iter().flat_map(|s| s.label.data.iter().copied()).collect();
    Ok((images, labels))
}
