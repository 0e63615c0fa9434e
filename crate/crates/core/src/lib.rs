//! Dual-stream remote photoplethysmography: classical extractors, STMap
//! construction and a confidence-gated video/STMap fusion network.

pub mod error;
pub mod numerics;
pub mod media_io;
pub mod stmap;
pub mod sdmu;
pub mod layers;
pub mod dceb;
pub mod decoder;
pub mod weights;
pub mod backbones;
pub mod baselines;
pub mod synth;
pub mod eval;
pub mod config;
pub mod selftest;

pub use error::{Error, Result};
