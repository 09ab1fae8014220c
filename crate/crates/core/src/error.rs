use thiserror::Error;

/// Errors raised across the forecasting pipeline.
#[derive(Debug, Error)]
pub enum StgcnError {
    /// Tensor or layer shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Malformed or out-of-range user input.
    #[error("input error: {0}")]
    Input(String),
    /// Non-convergence, non-finite values or divergence.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// API misuse, such as calling backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {message}")]
    Diverged {
        message: String,
        /// Parameters from the last epoch that finished with finite values.
        last_good: Box<crate::checkpoint::Checkpoint>,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl StgcnError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        StgcnError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            StgcnError::Numeric(_) | StgcnError::Diverged { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = StgcnError> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::StgcnError::Dimension(format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::StgcnError::Input(format!($($arg)*)) };
}
pub(crate) use dim_err;
pub(crate) use input_err;
