//! Hierarchical multi-scale masked time-series modeling.
//!
//! The crate is three layers:
//! 1. a small reverse-mode autodiff engine ([`tensor`], [`tape`], [`adam`],
//!    [`gradcheck`]) generic over the scalar type;
//! 2. the model itself: patch construction ([`patching`]), the hierarchical
//!    encoder ([`encoder`]), masked pre-training with feature distillation
//!    ([`pretrain`]) and cross-scale fine-tuning for forecasting
//!    ([`finetune`]);
//! 3. plumbing: CSV/synthetic data ([`data`]), run configs ([`config`]),
//!    checkpoints ([`checkpoint`]) and metrics ([`metrics`]).
//!
//! All numeric code is generic over [`num::Element`]; the aliases at the
//! crate root pin `f64`, which is what training and checkpoints use.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod num;
pub mod params;
pub mod patching;
pub mod pretrain;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::Mode;

/// `f64` tensor, the working type for training and the CLI.
pub type Tensor = tensor::Tensor<f64>;
/// `f64` autodiff tape.
pub type Tape = tape::Tape<f64>;
/// `f64` gradient map produced by [`tape::Tape::backward`].
pub type Gradients = tape::Gradients<f64>;
/// `f64` Adam optimizer state.
pub type AdamState = adam::AdamState<f64>;
