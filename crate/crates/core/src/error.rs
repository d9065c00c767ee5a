use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
///
/// `Domain` covers bad inputs and configurations; everything else is an
/// environment or internal failure. The CLI maps the former to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Domain(String),
    #[error("{path}: {msg}")]
    Load { path: PathBuf, msg: String },
    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("{0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] gazesr_tensor::TensorError),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load { path: path.into(), msg: msg.into() }
    }

    /// True for user-fixable problems (bad input, bad config, bad files).
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Load { .. } | Error::Leakage(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Domain(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
