//! Core of the watermark cloaking toolkit.
//!
//! A conditional generator learns to turn `(image, watermark)` into a small
//! perturbation that pulls the image's latent code toward the latent code of
//! the watermark, so that latent-space image-to-image imitation of the
//! cloaked image reproduces the watermark. This crate holds everything that
//! is pure computation and runs without `std`: networks with explicit
//! gradients, losses, the minimax trainer, single-pass cloaking, metrics,
//! noise/TV purification and a toy imitation backend.
//!
//! File formats, JPEG, checkpoints and the command-line interface live in
//! the `wmcloak` crate.

#![no_std]

extern crate alloc;

pub mod cloak;
pub mod defenses;
pub mod error;
pub mod image;
pub mod imitate;
pub mod latent;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use cloak::{cloak_image, CloakOptions, CloakResult};
pub use defenses::{DefenseConfig, DefenseKind};
pub use error::{Error, Result};
pub use image::{render_watermark, Image, Placement, RenderParams, Watermark};
pub use imitate::{ImitationConfig, ToyImitator};
pub use latent::{LatentCode, LatentEncoder, ToyEncoder};
pub use losses::{LossWeights, PerturbationBudget};
pub use metrics::{MetricReport, Psnr};
pub use networks::{init_networks, ArchConfig, Discriminator, Generator, PerturbationField};
pub use tensor::Tensor;
pub use trainer::{EpochRecord, LossRecord, Sample, TrainConfig, TrainState, Trainer};
