//! Conditional normalizing flows for sRGB camera noise.

pub mod context;
pub mod data;
pub mod error;
pub mod flows;
pub mod metrics;
pub mod model;
pub mod train;
pub mod zoo;

pub use context::{BoundContext, Conditioning, ConditioningContext, ContextBatch, Grid};
pub use error::{Error, Result};
pub use model::{FlowModel, LayerDesc, ModelSpec, NetConfig};
