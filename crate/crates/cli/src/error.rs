use thiserror::Error;

/// Exit status for a completed run whose checks passed.
pub const EXIT_OK: i32 = 0;
/// Exit status when a verification ran and failed.
pub const EXIT_FAILED: i32 = 1;
/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    /// The computation itself failed (divergent chain, unconverged R-hat, ...).
    #[error("run failed: {0}")]
    Run(heatbath_core::Error),
}

impl CliError {
    /// Errors from building a system are configuration errors; everything
    /// else the core reports happens while running.
    pub fn from_spec(e: heatbath_core::Error) -> Self {
        use heatbath_core::Error as E;
        match e {
            E::InvalidSpec(_) | E::Shape(_) | E::Domain(_) | E::SpectralGap { .. } => CliError::Config(e.to_string()),
            other => CliError::Run(other),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_USAGE,
            CliError::Run(_) => EXIT_FAILED,
        }
    }
}

impl From<heatbath_core::Error> for CliError {
    fn from(e: heatbath_core::Error) -> Self {
        CliError::from_spec(e)
    }
}
