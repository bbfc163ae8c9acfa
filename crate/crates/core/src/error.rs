use opssplit_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape or schema mismatch: {0}")]
    Shape(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("divergence guard tripped at frame {frame}: |value| = {value:e}")]
    Diverged { frame: usize, value: f64 },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::Numerical(_)
                | CoreError::Diverged { .. }
                | CoreError::Tensor(TensorError::NonFinite { .. })
                | CoreError::Tensor(TensorError::NonPositiveLog { .. })
        )
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
