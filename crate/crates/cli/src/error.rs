use parastep::engines::EngineError;
use parastep::predictor::PredictorError;
use parastep::protocol::ProtocolError;
use parastep::schedule::ScheduleError;
use thiserror::Error;

/// Exit code 2 for anything the user can fix in flags or config, 3 for
/// failures while running.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(m) => CliError::Config(m),
            EngineError::Schedule(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PredictorError> for CliError {
    fn from(e: PredictorError) -> Self {
        match e {
            PredictorError::InvalidConfig(_) | PredictorError::Schedule(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Config(m) => CliError::Config(m),
            ProtocolError::Schedule(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
