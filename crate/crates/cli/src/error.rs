use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("{0}")]
    Config(String),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: gridfill_core::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use gridfill_core::Error as E;
        match self {
            CliError::ConfigFile { .. } | CliError::Config(_) => EXIT_CONFIG,
            CliError::Core { source, .. } => match source {
                e if e.is_backend() => EXIT_BACKEND,
                E::InvalidArgument(_) => EXIT_CONFIG,
                E::Io { .. } | E::Parse { .. } | E::Data { .. } | E::Image { .. } | E::Shape(_) => EXIT_DATA,
                _ => EXIT_OTHER,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Adds a context line to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for gridfill_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}
