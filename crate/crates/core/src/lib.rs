//! Video-to-music conditioning at desk scale.
//!
//! Pipeline: synthetic paired clips, a toy RVQ audio codec, frame-triplet
//! dynamics and keyframe semantics encoders, temporal/dimensional alignment
//! with token extension, a cross-attention conditioned autoregressive
//! decoder with LoRA adapters, and annealing-weighted training.

pub mod alignment;
pub mod codec;
pub mod decoder;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod selftest;
pub mod semantics;
pub mod synthetic;
pub mod trainer;
pub mod video;
pub mod wav;

pub use error::{Error, Result};
