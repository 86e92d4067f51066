//! Joint scene-text super-resolution and recognition.
//!
//! Two branches share one forward pass: a super-resolution branch built from
//! clue-guided sequential residual blocks, and a transformer recognizer with a
//! CTC head. Between them, a guidance stage per iteration converts each
//! branch's state into a clue for the other one. See [`pipeline::ImageModel`]
//! for the full forward pass and [`pipeline::Trainer`] for optimization.

pub mod config;
pub mod datagen;
pub mod error;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rec_model;
pub mod sr_model;
pub mod text;

pub use config::ModelConfig;
pub use error::{Error, ErrorKind, Result};
pub use text::Label;

/// All tensors in this crate live on the host.
pub const DEVICE: candle_core::Device = candle_core::Device::Cpu;
