//! Multi-modal out-of-distribution detection with calibrated class descriptors.
//!
//! All encoder and language-model outputs arrive as precomputed embeddings and
//! text files. The crate calibrates sampled descriptor sets by retrieval
//! consistency, augments trusted classes with their descriptors, scores images
//! with a max-softmax class matching score and reports FPR95 / AUROC.

pub mod calibration;
pub mod descriptors;
pub mod embed;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod samples;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
