use thiserror::Error;

use crate::data::Violation;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite activation in {stage}: {source}")]
    Numeric { stage: String, source: TensorError },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed input: {0}")]
    Input(String),

    #[error("duplicate row for entity {entity} at timestamp {timestamp}")]
    DuplicateKey { entity: String, timestamp: String },

    #[error("series for entity {entity}, feature {feature} has fewer than two observed values")]
    AllMissing { entity: String, feature: String },

    #[error("feature {feature} is constant on the training range")]
    ZeroVariance { feature: String },

    #[error("integrity check failed with {} violation(s): {}", .0.len(), summarize(.0))]
    Integrity(Vec<Violation>),

    #[error("task construction failed: {0}")]
    Task(String),

    #[error("non-finite loss while {stage} task {task}")]
    NonFiniteLoss { stage: &'static str, task: usize },

    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        history: Vec<crate::meta::EpochRecord>,
        source: Box<Error>,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("variant {variant}: {source}")]
    Variant { variant: String, source: Box<Error> },

    #[error("parameter file: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

fn summarize(v: &[Violation]) -> String {
    let mut parts: Vec<String> = v.iter().take(5).map(ToString::to_string).collect();
    if v.len() > 5 {
        parts.push(format!("... and {} more", v.len() - 5));
    }
    parts.join("; ")
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
