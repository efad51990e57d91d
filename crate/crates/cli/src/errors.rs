//! Error taxonomy mapped onto process exit codes.
//!
//! Every failure is folded into one of four classes before it reaches
//! `main`: configuration problems (exit 2), stale or missing upstream
//! artifacts (exit 3), backend failures (exit 4), and everything else
//! (exit 1). The class decides the exit code; the message explains.

use thiserror::Error;
use uasim_core::corpus::CorpusError;
use uasim_core::datasets::DatasetError;
use uasim_core::distill::DistillError;
use uasim_core::gateway::GatewayError;
use uasim_core::memory::MemoryError;
use uasim_core::persona::PersonaError;
use uasim_core::simeval::SimEvalError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("upstream error: {0}")]
    Upstream(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Upstream(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("serialization: {e}"))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidRequest(_) | GatewayError::InvalidConfig(_) => {
                CliError::Config(e.to_string())
            }
            GatewayError::Auth(_) | GatewayError::EmbedFailed { .. } | GatewayError::DimMismatch { .. } => {
                CliError::Backend(e.to_string())
            }
            GatewayError::Cache { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Gateway(g) => g.into(),
            other => {
                let msg = other.to_string();
                match other {
                    DistillError::Backend { .. } | DistillError::Unparseable { .. } => {
                        CliError::Backend(msg)
                    }
                    DistillError::InvalidBatchCap => CliError::Config(msg),
                    _ => CliError::Internal(msg),
                }
            }
        }
    }
}

impl From<PersonaError> for CliError {
    fn from(e: PersonaError) -> Self {
        match e {
            PersonaError::TooManyClusters { .. }
            | PersonaError::InvalidKRange(_)
            | PersonaError::EmptyInput => CliError::Config(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<MemoryError> for CliError {
    fn from(e: MemoryError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Gateway(g) => g.into(),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<SimEvalError> for CliError {
    fn from(e: SimEvalError) -> Self {
        match e {
            SimEvalError::Gateway(g) => g.into(),
            SimEvalError::EndpointDown { .. } => CliError::Backend(e.to_string()),
            SimEvalError::TranscriptMismatch { .. } => CliError::Upstream(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}
