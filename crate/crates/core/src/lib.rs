//! Multi-modal unsupervised domain adaptation at desk scale.
//!
//! The crate trains small per-modality encoders on synthetic multi-kitchen
//! data and adapts them to an unlabelled target domain with:
//!
//! - relative norm alignment across modality feature norms,
//! - gradient-reversal adversarial branches at frame, video, and kitchen
//!   level (2K binary discriminators plus one K-way discriminator),
//! - attentive entropy on target predictions,
//! - ensemble consistency (min-entropy consensus) and complement entropy.
//!
//! Everything runs on a minimal f64 reverse-mode autodiff engine
//! ([`graph::Graph`]) so every loss can be checked against central
//! finite differences ([`graph::gradcheck`]).

pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Op, VarId};
pub use tensor::Tensor;
