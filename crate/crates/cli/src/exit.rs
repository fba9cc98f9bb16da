use std::fmt;

use progrow::Error;

/// Process exit status per failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Config = 2,
    Data = 3,
    Training = 4,
    Checkpoint = 5,
    Output = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn prefixed(self, prefix: &str) -> Self {
        CliError { message: format!("{prefix}: {}", self.message), ..self }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit class implied by a library error.
pub fn classify(e: &Error) -> Code {
    match e {
        Error::InvalidSpec(_)
        | Error::UnknownPreset(_)
        | Error::InvalidPlan(_)
        | Error::StageOutOfRange { .. }
        | Error::InvalidSchedule(_) => Code::Config,
        Error::Data(_) | Error::EmptyDataset(_) => Code::Data,
        Error::Checkpoint(_) | Error::CheckpointMismatch(_) => Code::Checkpoint,
        Error::Io { .. } => Code::Output,
        _ => Code::Training,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::new(classify(&e), e.to_string())
    }
}

pub trait Context<T> {
    /// Attaches a message and an exit class.
    fn context(self, code: Code, msg: impl fmt::Display) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn context(self, code: Code, msg: impl fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(code, format!("{msg}: {e}")))
    }
}
