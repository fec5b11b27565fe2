use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("metric not positive definite at grid point {point:?} (min eigenvalue {min_eigenvalue:e})")]
    Geometry {
        point: Vec<usize>,
        min_eigenvalue: f64,
    },

    #[error("flow degenerated at t = {t:.6e} near grid point {point:?} (min eigenvalue {min_eigenvalue:e})")]
    Degeneracy {
        t: f64,
        point: Vec<usize>,
        min_eigenvalue: f64,
    },

    #[error("spike width {rho} is below the resolution limit {limit} (4h)")]
    Resolution { rho: f64, limit: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("inconsistent audit input: {0}")]
    Inconsistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        LabError::Argument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
