use ddnfl::Error;

/// Failures, each tied to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    SynthesisInfeasible(String),
    #[error("{0}")]
    VerificationInfeasible(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Internal(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::NotConverged(_) => 4,
            Self::SynthesisInfeasible(_) => 5,
            Self::VerificationInfeasible(_) => 6,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidDimensions(_)
            | Error::InvalidConfig(_)
            | Error::InvalidBox(_)
            | Error::MalformedN(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => Self::Config(msg),
            Error::DataTooShort { .. } | Error::NotPersistentlyExciting => Self::Data(msg),
            _ => Self::Internal(msg),
        }
    }
}
