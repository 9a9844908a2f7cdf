//! Reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BackwardReport, Graph, NodeId};
pub use ops::{cosine_sim, kl_divergence, matmul, sigmoid, softmax_temp};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
