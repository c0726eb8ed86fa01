use thiserror::Error;

/// Failure classes of a run, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn status(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config-error",
            CliError::Numeric(_) => "numeric-failure",
            CliError::Io(_) => "io-error",
        }
    }
}

impl From<inrank_core::Error> for CliError {
    fn from(e: inrank_core::Error) -> Self {
        use inrank_core::Error as E;
        match e {
            E::Numeric(m) => CliError::Numeric(m),
            E::Io(m) => CliError::Io(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
