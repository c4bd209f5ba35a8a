//! Modular multimodal language-model training at desk scale: a ViT-style
//! vision encoder, a learnable-query visual abstractor, and a decoder-only
//! language model with LoRA adapters, trained in two freeze-scheduled stages.

pub mod abstractor;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod lora;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod train;
pub mod tensor;
pub mod tokenizer;
pub mod vision;

pub use error::{Error, Result};
