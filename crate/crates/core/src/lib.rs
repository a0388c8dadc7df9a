//! Early-fusion multimodal transformers (B2T2) and a dual-encoder baseline,
//! built on a small float64 autodiff core.

pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synthetic;
pub mod vision;
pub mod vocab;

pub use error::{Error, Result};
