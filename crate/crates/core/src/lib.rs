//! Self-supervised representation learning for adversarial attack detection.
//!
//! The crate trains a parallel axial-attention (PAA) residual encoder with
//! three contrastive objectives — a pixel-mapping loss over adversarially
//! selected augmentation pairs, prototype-wise contrastive estimation with
//! per-cluster concentration, and an instance-wise loss over a per-prototype
//! discrimination bank — then detects attacked images by their maximum
//! cosine similarity to the learned prototypes.
//!
//! Module map:
//! - [`tensor`]: dense tensors, tape autodiff, gradient checking, `.ten` IO
//! - [`encoder`]: axial attention, PAA blocks, encoder variants, checkpoints
//! - [`augment`]: the transformation set and risk-maximizing pair selection
//! - [`loss`]: InfoNCE, pixel-mapping, PCE, ICL and the weighted total
//! - [`bank`]: density-peak prototypes and the discrimination bank
//! - [`attack`]: FGSM, PGD, BIM, DeepFool, CW and JSMA against a probe head
//! - [`detect`]: prototype-similarity detector, calibration, detection rates
//! - [`data`], [`config`], [`train`], [`eval`], [`bench`]: the harness

pub mod attack;
pub mod augment;
pub mod bank;
pub mod bench;
pub mod config;
pub mod data;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tensor, sc};
