use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, XdError>;

#[derive(Debug, Error)]
pub enum XdError {
    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("convolved covariance for point {point}, component {component} is not positive definite after jitter")]
    ConvolvedNotPositiveDefinite { point: usize, component: usize },

    #[error("component {component} collapsed at iteration {iteration}: responsibility mass {mass:e} below floor {floor:e}")]
    DegenerateComponent {
        component: usize,
        iteration: usize,
        mass: f64,
        floor: f64,
    },

    #[error("non-finite loss or gradient at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl XdError {
    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            XdError::NotPositiveDefinite { .. }
                | XdError::ConvolvedNotPositiveDefinite { .. }
                | XdError::DegenerateComponent { .. }
                | XdError::NonFinite { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XdError::Io {
            path: path.into(),
            source,
        }
    }
}
