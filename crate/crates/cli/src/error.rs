use amp_core::AmpError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` has not been run in {run_dir}; run `amp {command}` first")]
    MissingStage {
        stage: String,
        command: String,
        run_dir: String,
    },
    #[error(transparent)]
    Core(#[from] AmpError),
}

impl CliError {
    /// 0 success, 2 config error, 3 missing stage, 4 numeric failure, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingStage { .. } => 3,
            CliError::Core(AmpError::NumericFailure { .. }) => 4,
            CliError::Core(AmpError::Config(_) | AmpError::Parameter(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}
