use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] regvar_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(
                regvar_core::Error::UnknownDataset(_)
                | regvar_core::Error::InvalidArgument(_)
                | regvar_core::Error::Json(_)
                | regvar_core::Error::Schema(_)
                | regvar_core::Error::Parse { .. },
            ) => 2,
            _ => 1,
        }
    }
}
