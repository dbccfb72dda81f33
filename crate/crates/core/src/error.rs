use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient samples: {got} samples for {needed} components")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("class {class_id}: no training samples")]
    EmptyClass { class_id: usize },

    #[error("class {class_id}: {source}")]
    Class {
        class_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("component {component}: covariance is not positive definite after regularisation")]
    SingularCovariance { component: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification of an [`Error`], used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => ErrorKind::Validation,
            Error::InsufficientSamples { .. }
            | Error::EmptyClass { .. }
            | Error::Data(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::SingularCovariance { .. } | Error::Numerical(_) => ErrorKind::Numerical,
            Error::Class { source, .. } => source.kind(),
        }
    }

    pub(crate) fn in_class(self, class_id: usize) -> Error {
        match self {
            e @ (Error::EmptyClass { .. } | Error::Class { .. }) => e,
            e => Error::Class {
                class_id,
                source: Box::new(e),
            },
        }
    }
}
