use std::fmt;

use convmf::baselines::BaselineError;
use convmf::checkpoint::CheckpointError;
use convmf::corpus::CorpusError;
use convmf::embeddings::EmbeddingError;
use convmf::model::ModelError;
use convmf::numerics::NumericsError;
use convmf::topics::TopicError;
use convmf::training::TrainError;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed inputs, bad flags: exit 2.
    Input(String),
    /// Artifacts that do not belong together: exit 3.
    Consistency(String),
    /// Non-finite losses or divergence: exit 4.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Consistency(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        CliError::Input(msg.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Consistency(m) => write!(f, "consistency error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::VocabHashMismatch { .. } => CliError::Consistency(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Mismatch { .. } => CliError::Consistency(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::DimensionMismatch(_) => CliError::Consistency(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) => n.into(),
            other => CliError::Consistency(other.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Diverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TopicError> for CliError {
    fn from(e: TopicError) -> Self {
        match e {
            TopicError::Checkpoint(c) => c.into(),
            TopicError::Model(m) => m.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Topics(t) => t.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}
