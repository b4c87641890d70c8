//! Self-distillation training toolkit for small vision transformers under
//! leave-one-domain-out domain generalization.
//!
//! The pieces:
//! - [`backbone`]: a ViT with hand-written backward pass and an
//!   intermediate-block tap through the shared head.
//! - [`losses`]: temperature-scaled KL distillation terms and cross-entropy.
//! - [`augment`]: the AutoAugment ImageNet policy over `[0, 1]` images.
//! - [`data`]: multi-domain datasets, synthetic generator, noise corruption,
//!   image folders and the split protocol.
//! - [`trainer`]: training step, model selection and multi-seed driver.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod manifest;
pub mod pixels;
pub mod report;
pub mod rng;
pub mod selfcheck;
pub mod trainer;

pub use augment::{default_policy, parse_policy, AugmentOp, AugmentPolicy, OpName};
pub use backbone::{BackboneConfig, Model};
pub use data::{MultiDomainDataset, NoiseKind, NoiseSpec, ProtocolSplit, Sample, SynthConfig};
pub use error::{Error, ErrorClass, Result};
pub use losses::{Detached, LossBreakdown, LossConfig, Logits};
pub use pixels::ImageShape;
pub use trainer::{RunResult, TrainConfig, Variant};
