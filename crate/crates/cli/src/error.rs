use std::fmt;
use std::path::Path;

use vdit_core::metrics::IdMismatch;
use vdit_core::Error;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_SCHEMA: u8 = 2;
pub const EXIT_ID_MISMATCH: u8 = 3;
pub const EXIT_STAGE: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input, or a bad flag value.
    Input(String),
    Mismatch(IdMismatch),
    Stage {
        stage: String,
        message: String,
    },
    ChecksFailed,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_SCHEMA,
            CliError::Mismatch(_) => EXIT_ID_MISMATCH,
            CliError::Stage { .. } => EXIT_STAGE,
            CliError::ChecksFailed => EXIT_CHECK_FAILED,
        }
    }

    pub fn input(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }

    pub fn stage(stage: &str, err: impl fmt::Display) -> Self {
        CliError::Stage { stage: stage.to_string(), message: err.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(msg) => write!(f, "input error: {msg}"),
            CliError::Mismatch(m) => {
                write!(f, "id mismatch")?;
                if !m.missing_ground_truth.is_empty() {
                    write!(f, "; no ground truth for: {}", m.missing_ground_truth.join(", "))?;
                }
                if !m.missing_prediction.is_empty() {
                    write!(f, "; no prediction for: {}", m.missing_prediction.join(", "))?;
                }
                Ok(())
            }
            CliError::Stage { stage, message } => write!(f, "stage {stage} failed: {message}"),
            CliError::ChecksFailed => write!(f, "gradient checks failed"),
        }
    }
}

impl From<vdit_core::demo::StageError> for CliError {
    fn from(e: vdit_core::demo::StageError) -> Self {
        CliError::stage(e.stage, e.source)
    }
}

/// Input-side errors keep exit code 2; anything else is a stage failure.
pub fn classify(stage: &str, err: Error) -> CliError {
    match err {
        Error::Schema { .. } | Error::Json(_) | Error::Config(_) | Error::Io(_) => CliError::Input(err.to_string()),
        other => CliError::stage(stage, other),
    }
}

pub type CliResult<T> = Result<T, CliError>;
