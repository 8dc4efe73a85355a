use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit status classes used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn exit_class(&self) -> ExitClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ExitClass::Usage,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Checkpoint(_) => ExitClass::Data,
            Error::Dimension(_) => ExitClass::Data,
            Error::NotPositiveDefinite { .. } | Error::NonFinite(_) | Error::Numerical(_) => {
                ExitClass::Numerical
            }
            Error::Stage { source, .. } => source.exit_class(),
        }
    }
}

pub(crate) fn dim_err(what: impl Into<String>) -> Error {
    Error::Dimension(what.into())
}
