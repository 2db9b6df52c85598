use srgbflow_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A layer produced NaN/Inf or hit a domain error during evaluation.
    #[error("layer `{layer}` failed: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },

    #[error("non-finite loss (last layer evaluated: `{layer}`)")]
    NonFiniteLoss { layer: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for NaN/Inf and domain failures during numeric evaluation.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. } => true,
            Error::Layer { source, .. } | Error::Tensor(source) => matches!(
                source,
                TensorError::NonFinite { .. } | TensorError::Domain { .. } | TensorError::Singular(_)
            ),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
