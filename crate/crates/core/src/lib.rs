//! Anatomy-level vision-language contrastive pre-training for volumetric
//! images, at desk scale.
//!
//! The pipeline: synthetic CT-like volumes with segmentation masks and
//! templated reports (`synth`), report decomposition into per-anatomy
//! descriptions (`report`), anatomy grouping and crop sampling (`atlas`),
//! toy volumetric/text encoders with anatomy query pooling (`encoder`),
//! the per-anatomy contrastive engine with false-negative correction and
//! co-teaching (`contrastive`), and a zero-shot evaluation harness
//! (`eval`). Everything runs on a small f64 reverse-mode autodiff tape
//! (`autodiff`) so gradients can be verified against finite differences.

pub mod atlas;
pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod eval;
pub mod report;
pub mod synth;
pub mod util;
