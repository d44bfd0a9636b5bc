//! Minimal dense-tensor computation graph with reverse-mode differentiation
//! and an Adam optimizer: the substrate every model in this crate trains on.

mod adam;
mod checkpoint;
mod finite_diff;
mod graph;
mod params;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamError, AdamState};
pub use checkpoint::{load_params, params_from_str, params_to_string, save_params, CheckpointError};
pub use finite_diff::finite_diff_grad;
pub use graph::{Graph, GraphError, NodeId, SoftplusBase};
pub use params::{init_linear_bias, init_linear_weight, ParamBinding, ParamError, ParamSet};
pub use tensor::{Tensor, TensorError};
