//! Reverse-mode differentiation over dense real and complex tensors.
//!
//! Complex tensors keep separate real and imaginary buffers. The gradient of
//! a real loss with respect to a complex tensor is stored as
//! `dL/dRe + i dL/dIm`, so optimizers act on the two parts independently.

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, clip_grad_norm, global_norm, step_lr, AdamConfig, AdamState, ParamStore};
pub use tensor::{Dtype, Tensor, TensorError};
