//! Commands behind the `malaria` binary: train, evaluate, compare and the
//! gradient and parameter-count checks.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{
    compare, evaluate, gradcheck_report, load_data, paramcheck_report, train, CompareOutcome,
    Dataset, EpochRecord, TrainOutcome,
};
pub use config::{Origin, RunConfig};

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for configuration or validation failures.
pub const EXIT_CONFIG: i32 = 1;
/// Exit code for runtime and numeric failures.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config {
        line: Option<usize>,
        message: String,
    },

    /// A validation harness found failures.
    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] malaria_core::Error),
}

impl CliError {
    pub fn config(line: Option<usize>, message: impl Into<String>) -> Self {
        CliError::Config {
            line,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use malaria_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Check(_) => EXIT_CONFIG,
            CliError::Core(E::Config(_) | E::Layout(_) | E::Argument(_) | E::Label(_)) => {
                EXIT_CONFIG
            }
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}
