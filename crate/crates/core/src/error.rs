use hoi_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HoiError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("fixed-point iteration diverged at iteration {iteration}{}", sample.as_ref().map(|s| format!(" (sample {s})")).unwrap_or_default())]
    Diverged { iteration: usize, sample: Option<String> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown {site} strategy `{name}` (registered: {known})")]
    UnknownStrategy { site: &'static str, name: String, known: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HoiError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HoiError + '_ {
    move |source| HoiError::Io {
        path: path.display().to_string(),
        source,
    }
}
