use thiserror::Error;

/// Errors raised across the inference pipeline.
///
/// Variants are grouped by the kind of failure so that frontends can map
/// them onto exit codes without inspecting messages.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of its allowed range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Malformed or inconsistent dataset.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine could not produce a usable answer.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The Markov chain never moved after adaptation.
    #[error("sampler diagnostic: {0}")]
    Sampler(String),

    /// Wire-format or message-exchange failure.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Error tagged with the pipeline stage that raised it.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
