pub mod alignment_loss;
pub mod backbone_adapter;
pub mod config;
pub mod demo;
pub mod dtl_encoder;
pub mod error;
pub mod gradcheck;
pub mod grounding_gate;
pub mod metrics;
pub mod numerics;
pub mod prompt;
pub mod span_decoder;
pub mod token_fusion;

pub use error::{Error, Result};
