//! Masked token image generation: a VQ tokenizer, a masked token predictor
//! and a guided parallel decoder, with training, LoRA and int8 tooling.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backbone;
pub mod conditioning;
mod error;
pub mod nn;
pub mod numerics;
pub mod quantize;
pub mod sampler;
pub mod schedule;
pub mod tooling;
pub mod training;
pub mod vq;

pub use error::{Error, Result};
