//! Dense tensors with a reverse-mode tape, the layers the encoder and the
//! denoiser are built from, Adam, and SDCK checkpoints.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Var};
pub use optim::{adam_step, Adam, AdamConfig};
pub use params::{global_grad_norm, kaiming_uniform, Grads, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
