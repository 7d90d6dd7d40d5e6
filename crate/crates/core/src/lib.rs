//! Knowledge-gated calibration for fine-tuning, on small surrogate
//! classifiers.
//!
//! A pretrained classifier stands in for a model with prior knowledge.
//! Fine-tuning samples are split into known and unknown by how reliably the
//! pretrained model answers them under input perturbation. During
//! fine-tuning an NLL gate with an adaptively searched threshold decides,
//! per sample, whether a calibration regularizer (label smoothing, margin
//! label smoothing, or a confidence penalty) is added to the cross-entropy.

// `!(x >= 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod harness;
pub mod knowledge;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod posthoc;
pub mod seed;
pub mod trainer;

pub use data::{Dataset, KnowledgeTag, Sample};
pub use error::{Error, Result};
pub use exec::Exec;
