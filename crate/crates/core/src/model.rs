//! The full network: `M` encoders, four fusion blocks, one shared head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Tape, Var};
use crate::config::{ModelConfig, NUM_STAGES};
use crate::encoder::{Encoder, StagePyramid};
use crate::error::{Error, Result};
use crate::fusion::FusionBlock;
use crate::head::SegmentationHead;
use crate::param::{ParamBuilder, ParamStore};

/// Parameter-name prefix shared by all encoder parameters.
pub const ENCODER_PREFIX: &str = "enc.";

#[derive(Debug, Clone)]
pub struct U3m {
    pub cfg: ModelConfig,
    pub encoders: Vec<Encoder>,
    pub fusion: Vec<FusionBlock>,
    pub head: SegmentationHead,
}

/// Intermediate results of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pyramids: Vec<StagePyramid>,
    pub fused: [Var; NUM_STAGES],
    pub logits: Var,
}

impl U3m {
    /// Builds the model and a freshly initialised parameter store. The
    /// config is validated first; nothing is allocated for an invalid one.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);

        let encoders = cfg
            .in_channels
            .iter()
            .enumerate()
            .map(|(m, &c)| {
                let mut ep = pb.sub(format!("enc.{m}"));
                Encoder::new(&mut ep, c, &cfg.encoder)
            })
            .collect::<Result<Vec<_>>>()?;

        let sizes = cfg.stage_sizes(cfg.image_size);
        let fusion = (0..NUM_STAGES)
            .map(|i| {
                let bins = cfg.fusion.bins_for_extent(sizes[i].0.min(sizes[i].1));
                let mut fp = pb.sub(format!("fuse.{}", i + 1));
                FusionBlock::new(
                    &mut fp,
                    cfg.modalities(),
                    cfg.encoder.stage_channels[i],
                    &bins,
                    &cfg.fusion,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let head = {
            let mut hp = pb.sub("head");
            SegmentationHead::new(&mut hp, &cfg.encoder.stage_channels, &cfg.head)?
        };

        let model = Self {
            cfg: cfg.clone(),
            encoders,
            fusion,
            head,
        };
        if cfg.train.freeze_encoders {
            store.set_trainable_prefix(ENCODER_PREFIX, false);
        }
        Ok((model, store))
    }

    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    /// Full forward pass keeping every intermediate handle.
    pub fn forward_trace(&self, t: &mut Tape, p: &Bound, images: &[Var]) -> Result<ForwardTrace> {
        if images.len() != self.modalities() {
            return Err(Error::Fusion {
                modality: images.len().min(self.modalities()),
                msg: format!(
                    "model has {} modalities, got {} images",
                    self.modalities(),
                    images.len()
                ),
            });
        }
        let s = t.shape(images[0]).to_vec();
        for (m, &img) in images.iter().enumerate() {
            let sm = t.shape(img);
            if sm.len() != 4 || sm[0] != s[0] || sm[2..] != s[2..] {
                return Err(Error::Fusion {
                    modality: m,
                    msg: format!("image shape {sm:?} does not share batch/spatial extent with {s:?}"),
                });
            }
        }
        let pyramids = self
            .encoders
            .iter()
            .zip(images)
            .map(|(enc, &img)| enc.encode(t, p, img))
            .collect::<Result<Vec<_>>>()?;
        let mut fused = [images[0]; NUM_STAGES];
        for (i, block) in self.fusion.iter().enumerate() {
            let feats: Vec<Var> = pyramids.iter().map(|py| py.features[i]).collect();
            fused[i] = block.forward(t, p, &feats)?;
        }
        let logits = self.head.decode(t, p, &fused, (s[2], s[3]))?;
        Ok(ForwardTrace {
            pyramids,
            fused,
            logits,
        })
    }

    /// Logits `[B, N, H, W]`.
    pub fn forward(&self, t: &mut Tape, p: &Bound, images: &[Var]) -> Result<Var> {
        self.forward_trace(t, p, images).map(|tr| tr.logits)
    }
}
