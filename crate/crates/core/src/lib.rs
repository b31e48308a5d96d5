//! Desk-scale laboratory for fine-tuning instability.
//!
//! The crate bundles a small reverse-mode autodiff engine, a BERT-shaped toy
//! encoder, Adam with an explicit bias-correction switch, and the diagnostics
//! used to study unstable fine-tuning: per-layer gradient norms, 2D loss
//! surfaces, layer-substitution forgetting probes, iteration-matched
//! downsampling and multi-seed stability statistics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod autodiff;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod forgetting;
pub mod gradcheck;
pub mod landscape;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod svg;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{LabError, Result};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
