//! Adversarial perturbations against a small semantic segmentation network.
//!
//! This crate is a desk-scale laboratory for (universal) adversarial
//! perturbations against dense prediction: it trains a miniature
//! fully-convolutional segmentation network on procedurally generated
//! scenes, derives adversarial target segmentations (a fixed scene, or the
//! model's own prediction with one class removed), optimizes image-dependent
//! and universal tiled perturbations with clipped sign-gradient steps, and
//! evaluates them with the standard rates and IoU metrics.
//!
//! Every tensor op is hand-written with an exact backward pass; the
//! finite-difference checker in [`tensor::gradcheck`] verifies all of them.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability has one. The `advseg` binary drives the same
//! pipelines from experiment config files.

pub mod attacks;
pub mod error;
pub mod experiment;
pub mod label;
pub mod metrics;
pub mod net;
pub mod netpbm;
pub mod scene;
pub mod targets;
pub mod tensor;

pub use error::{Error, Result};
pub use label::LabelMap;
pub use tensor::Tensor;
