use openset_core::ErrorKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: openset_core::Error,
    },

    #[error(transparent)]
    Core(#[from] openset_core::Error),
}

impl CliError {
    /// 1 usage or validation, 2 data, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        let kind = match self {
            CliError::Usage(_) => ErrorKind::Validation,
            CliError::Data(_) => ErrorKind::Data,
            CliError::InFile { source, .. } | CliError::Core(source) => source.kind(),
        };
        match kind {
            ErrorKind::Validation => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
