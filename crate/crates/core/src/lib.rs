//! Late-fusion text and speech language modeling at desk scale.

pub mod aclm;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod lora;
pub mod mole;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod train;
mod transformer;
pub mod vocab;

pub use error::{Error, Result};
pub use transformer::BlockDims;
