//! U3M: unbiased multiscale modal fusion for multimodal semantic
//! segmentation.
//!
//! Per-modality mix-transformer encoders feed four per-stage fusion blocks
//! (pyramidal pooling + pyramidal convolution + channel attention), whose
//! outputs a shared MLP head decodes into per-pixel class logits. Everything
//! runs on a small `f64` reverse-mode autodiff engine.

mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod head;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod param;
pub mod tensor;
pub mod train;

pub use autodiff::{Bound, Grads, Tape, Var};
pub use config::ModelConfig;
pub use data::ModalitySample;
pub use error::{Error, Result};
pub use head::SegmentationMap;
pub use metrics::ConfusionMatrix;
pub use model::U3m;
pub use param::{ParamBuilder, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
