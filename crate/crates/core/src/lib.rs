//! Semantic-routed low-rank adaptation: model, objectives, training, and
//! analysis tooling shared by the CLI and benchmarks.

pub mod autodiff;
mod error;
pub mod adapter;
pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod train;

pub use autodiff::{Graph, NodeId, ParamId, ParamStore, Parameter, Tensor};
pub use error::{Error, ErrorClass, Result};
pub use rng::{RngSnapshot, RngState};
