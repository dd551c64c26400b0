use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] mmforge::Error),

    #[error("{step}: {source}")]
    Step {
        step: &'static str,
        source: mmforge::Error,
    },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub const EXIT_COMPUTE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn core_code(e: &mmforge::Error) -> i32 {
    use mmforge::Error as E;
    match e {
        E::Variant { source, .. } => core_code(source),
        E::Tensor(_) | E::Numeric { .. } | E::NonFiniteLoss { .. } | E::Diverged { .. } | E::Metric(_) => EXIT_COMPUTE,
        _ => EXIT_USAGE,
    }
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 1 for failures during computation, 2 for bad usage or input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => EXIT_USAGE,
            CliError::Core(e) | CliError::Step { source: e, .. } => core_code(e),
        }
    }
}

/// Tags an error with the pipeline step that raised it.
pub trait StepContext<T> {
    fn step(self, step: &'static str) -> Result<T, CliError>;
}

impl<T> StepContext<T> for mmforge::Result<T> {
    fn step(self, step: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Step { step, source })
    }
}
