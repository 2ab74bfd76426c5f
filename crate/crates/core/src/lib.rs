//! Source-free unsupervised personalization for cross-user surface-EMG
//! gesture recognition.
//!
//! A convolutional backbone is pretrained on labeled source users. Each new
//! (target) user is then adapted without any source data in two stages:
//! sequence-cross contrastive alignment ([`ssa`]) followed by
//! confidence-filtered pseudo-label fine-tuning with an EMA teacher
//! ([`ssp`]). [`eval`] runs the cross-user protocol and ablation grid.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod seed;
pub mod ssa;
pub mod ssp;

pub use error::{Error, Result};
