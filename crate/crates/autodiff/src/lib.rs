//! Dense `f32` tensors with tape-based reverse-mode differentiation, the Adam
//! optimizer, and a flat binary checkpoint format.

pub mod adam;
pub mod checkpoint;
mod error;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGrads, ParamStore, ParamVars};
pub use tensor::{broadcast_shape, Tensor};
