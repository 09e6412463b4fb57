//! Dense tensors, reverse-mode autodiff, AdamW and the cosine schedule.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, SeqLayout, Segment, Trainable, Var};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, AdamWState};
pub use params::{ParamHost, ParamStore};
pub use tensor::{matmul, softmax, Real, Tensor};

pub(crate) use tensor::argmax;
