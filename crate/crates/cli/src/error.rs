use thiserror::Error;

/// Process exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICS: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] hyperplanes::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use hyperplanes::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(E::Contract(_)) => EXIT_USAGE,
            CliError::Core(E::Numerics(_)) => EXIT_NUMERICS,
            CliError::Core(E::Format { .. } | E::Io { .. } | E::Geometry(_) | E::Shape(_)) => EXIT_DATA,
        }
    }
}
