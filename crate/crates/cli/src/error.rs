use std::path::Path;

use qebm::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 2 config, 3 optimization, 4 span/completeness, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 5,
            CliError::Core(e) => match e {
                Error::Optimization(_) => 3,
                Error::Span(_) | Error::NotInformationallyComplete(_) | Error::LinearDependence(_) => 4,
                Error::Io(_) | Error::Corrupt(_) | Error::Schema(_) => 5,
                Error::Size(_)
                | Error::Spec(_)
                | Error::NotHermitian(_)
                | Error::NegativeBeta(_)
                | Error::Degenerate { .. }
                | Error::InvalidParameter(_)
                | Error::InvalidState(_)
                | Error::TableCap { .. } => 2,
            },
        }
    }
}
