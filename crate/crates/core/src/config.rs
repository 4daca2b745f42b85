//! Model, fusion, head and training hyperparameters, with validation.

use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 4;

pub const MAX_MODALITIES: usize = 16;

/// Per-modality mix-transformer encoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub stage_depths: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    /// Spatial-reduction ratio over the flattened token sequence.
    pub sr_ratios: [usize; NUM_STAGES],
    pub patch_sizes: [usize; NUM_STAGES],
    pub patch_strides: [usize; NUM_STAGES],
    /// Hidden width of the Mix-FFN as a multiple of the stage width.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            stage_depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            sr_ratios: [4, 4, 2, 1],
            patch_sizes: [7, 3, 3, 3],
            patch_strides: [4, 2, 2, 2],
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// Downsampling factor of stage `i` (0-based) relative to the input.
    pub fn stage_factor(&self, i: usize) -> usize {
        self.patch_strides[..=i].iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Adaptive-pooling grid sizes, ascending.
    pub pool_bins: Vec<usize>,
    /// Odd kernel sizes of the depthwise convolution branches.
    pub conv_kernels: Vec<usize>,
    /// Channel-attention bottleneck reduction.
    pub ca_reduction: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            pool_bins: vec![1, 2, 3, 6],
            conv_kernels: vec![3, 5, 7],
            ca_reduction: 4,
        }
    }
}

impl FusionConfig {
    /// Pooling grids used at a stage of spatial extent `min_extent`: the
    /// configured bins that fit inside the feature map.
    pub fn bins_for_extent(&self, min_extent: usize) -> Vec<usize> {
        self.pool_bins.iter().copied().filter(|&b| b <= min_extent).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub decoder_dim: usize,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            decoder_dim: 32,
            num_classes: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub freeze_encoders: bool,
    pub hflip: bool,
    pub rotate: bool,
    pub scale: bool,
    pub ignore_index: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            lr_schedule: LrSchedule::Constant,
            batch_size: 4,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            freeze_encoders: false,
            hflip: true,
            rotate: true,
            scale: true,
            ignore_index: 255,
        }
    }
}

/// Dataset-facing options.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    /// Pad inputs up to the next multiple of 32 (edge replication for
    /// images, ignore for labels).
    pub pad_to_32: bool,
    /// Optional display names; defaults to `c0, c1, ...`.
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channels of each modality; its length is the modality count `M`.
    pub in_channels: Vec<usize>,
    /// Spatial size `(H, W)` the model is validated for.
    pub image_size: (usize, usize),
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: vec![3],
            image_size: (64, 64),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn modalities(&self) -> usize {
        self.in_channels.len()
    }

    /// Desk-scale configuration with `in_channels.len()` modalities.
    pub fn desk(in_channels: Vec<usize>, num_classes: usize, image_size: (usize, usize)) -> Self {
        Self {
            in_channels,
            image_size,
            head: HeadConfig {
                num_classes,
                ..HeadConfig::default()
            },
            ..Self::default()
        }
    }

    /// `(H_i, W_i)` of every stage for an input of `(h, w)`.
    pub fn stage_sizes(&self, (h, w): (usize, usize)) -> [(usize, usize); NUM_STAGES] {
        std::array::from_fn(|i| {
            let f = self.encoder.stage_factor(i);
            (h / f, w / f)
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.data.class_names.is_empty() {
            (0..self.head.num_classes).map(|c| format!("c{c}")).collect()
        } else {
            self.data.class_names.clone()
        }
    }

    /// Checks every structural invariant for inputs of `image_size`.
    pub fn validate(&self) -> Result<()> {
        self.validate_for(self.image_size)
    }

    pub fn validate_for(&self, hw: (usize, usize)) -> Result<()> {
        self.check(hw)
            .map_err(|(key, msg)| Error::Config(format!("{key}: {msg}")))
    }

    /// Like [`validate_for`](Self::validate_for), but reports the config
    /// key responsible for the first violation.
    pub fn check(&self, (h, w): (usize, usize)) -> std::result::Result<(), (&'static str, String)> {
        fn bad(key: &'static str, msg: String) -> std::result::Result<(), (&'static str, String)> {
            Err((key, msg))
        }
        if self.in_channels.is_empty() {
            return bad("in_channels", "at least one modality is required".into());
        }
        if self.in_channels.len() > MAX_MODALITIES {
            return bad(
                "in_channels",
                format!(
                    "{} modalities exceed the limit of {MAX_MODALITIES}",
                    self.in_channels.len()
                ),
            );
        }
        if let Some(m) = self.in_channels.iter().position(|&c| c == 0) {
            return bad("in_channels", format!("modality {m} has zero input channels"));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return bad(
                "image_size",
                format!("image size {h}x{w} must be a positive multiple of 32"),
            );
        }

        let enc = &self.encoder;
        if enc.patch_strides != [4, 2, 2, 2] {
            return bad(
                "patch_strides",
                format!(
                    "patch strides {:?} must be [4,2,2,2] to give 1/4..1/32 stages",
                    enc.patch_strides
                ),
            );
        }
        if enc.mlp_ratio == 0 {
            return bad("mlp_ratio", "mlp_ratio must be >= 1".into());
        }
        let sizes = self.stage_sizes((h, w));
        #[allow(clippy::needless_range_loop)]
        for i in 0..NUM_STAGES {
            let (c, heads, r) = (enc.stage_channels[i], enc.heads[i], enc.sr_ratios[i]);
            let k = enc.patch_sizes[i];
            let s = i + 1;
            if c == 0 {
                return bad("channels", format!("stage {s}: channels must be >= 1"));
            }
            if heads == 0 {
                return bad("heads", format!("stage {s}: heads must be >= 1"));
            }
            if r == 0 {
                return bad("sr_ratios", format!("stage {s}: sr ratio must be >= 1"));
            }
            if enc.stage_depths[i] == 0 {
                return bad("depths", format!("stage {s}: depth must be >= 1"));
            }
            if k.is_multiple_of(2) || k < enc.patch_strides[i] {
                return bad(
                    "patch_sizes",
                    format!(
                        "stage {s}: patch size {k} must be odd and >= stride {}",
                        enc.patch_strides[i]
                    ),
                );
            }
            if c % heads != 0 {
                return bad(
                    "heads",
                    format!("stage {s}: {c} channels not divisible by {heads} heads"),
                );
            }
            let n = sizes[i].0 * sizes[i].1;
            if !n.is_multiple_of(r) {
                return bad(
                    "sr_ratios",
                    format!(
                        "stage {s}: {n} tokens ({}x{}) not divisible by sr ratio {r}",
                        sizes[i].0, sizes[i].1
                    ),
                );
            }
            if self.fusion.ca_reduction == 0 || c % self.fusion.ca_reduction != 0 {
                return bad(
                    "ca_reduction",
                    format!(
                        "stage {s}: {c} channels not divisible by channel-attention reduction {}",
                        self.fusion.ca_reduction
                    ),
                );
            }
        }

        let fu = &self.fusion;
        if fu.pool_bins.is_empty() || fu.pool_bins.contains(&0) {
            return bad(
                "pool_bins",
                "pool_bins must be a non-empty set of positive sizes".into(),
            );
        }
        if fu.pool_bins.windows(2).any(|p| p[0] >= p[1]) {
            return bad(
                "pool_bins",
                format!("pool_bins {:?} must be strictly ascending", fu.pool_bins),
            );
        }
        for (i, &(sh, sw)) in sizes.iter().enumerate() {
            if fu.bins_for_extent(sh.min(sw)).is_empty() {
                return bad(
                    "pool_bins",
                    format!(
                        "stage {}: no pooling bin fits the {sh}x{sw} feature map (bins {:?})",
                        i + 1,
                        fu.pool_bins
                    ),
                );
            }
        }
        if fu.conv_kernels.is_empty() {
            return bad("conv_kernels", "conv_kernels must not be empty".into());
        }
        if let Some(k) = fu.conv_kernels.iter().find(|&&k| k % 2 == 0) {
            return bad("conv_kernels", format!("conv kernel {k} must be odd"));
        }

        if self.head.decoder_dim == 0 {
            return bad("decoder_dim", "decoder_dim must be >= 1".into());
        }
        if self.head.num_classes < 2 {
            return bad(
                "num_classes",
                format!("num_classes {} must be >= 2", self.head.num_classes),
            );
        }
        if self.head.num_classes > 255 || usize::from(self.train.ignore_index) < self.head.num_classes {
            return bad(
                "ignore_index",
                format!(
                    "ignore_index {} collides with {} classes",
                    self.train.ignore_index, self.head.num_classes
                ),
            );
        }
        if !self.data.class_names.is_empty() && self.data.class_names.len() != self.head.num_classes {
            return bad(
                "class_names",
                format!(
                    "{} class names for {} classes",
                    self.data.class_names.len(),
                    self.head.num_classes
                ),
            );
        }

        let tr = &self.train;
        if !(tr.lr > 0.0 && tr.lr.is_finite()) {
            return bad("lr", format!("lr {} must be positive", tr.lr));
        }
        if tr.batch_size == 0 {
            return bad("batch_size", "batch_size must be >= 1".into());
        }
        if tr.epochs == 0 {
            return bad("epochs", "epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&tr.beta1) {
            return bad("beta1", format!("beta1 {} must lie in [0,1)", tr.beta1));
        }
        if !(0.0..1.0).contains(&tr.beta2) {
            return bad("beta2", format!("beta2 {} must lie in [0,1)", tr.beta2));
        }
        if !(tr.adam_eps > 0.0 && tr.adam_eps.is_finite()) {
            return bad("adam_eps", format!("adam_eps {} must be positive", tr.adam_eps));
        }
        Ok(())
    }
}
