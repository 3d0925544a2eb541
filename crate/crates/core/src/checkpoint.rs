//! Versioned JSON container for trained models.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{OffsetModel, PmfParams};
use crate::model::ModelParams;

pub const CHECKPOINT_FORMAT: &str = "convmf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (format {format:?}, version {version})")]
    Format { format: String, version: u32 },
    #[error("{what} mismatch: checkpoint has {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelState {
    Offset(OffsetModel),
    Pmf(PmfParams),
    Convmf(ModelParams),
}

impl ModelState {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelState::Offset(_) => "offset",
            ModelState::Pmf(_) => "pmf",
            ModelState::Convmf(_) => "convmf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub vocab_hash: String,
    /// Source id of the word-vector table, empty for rating-only models.
    pub embedding_source: String,
    /// Seed that produced the initialized rows of the word-vector table.
    pub embedding_seed: u64,
    pub config: serde_json::Value,
    pub model: ModelState,
}

impl Checkpoint {
    pub fn new(
        model: ModelState,
        vocab_hash: impl Into<String>,
        embedding_source: impl Into<String>,
        embedding_seed: u64,
        config: serde_json::Value,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            vocab_hash: vocab_hash.into(),
            embedding_source: embedding_source.into(),
            embedding_seed,
            config,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format {
                format: ck.format,
                version: ck.version,
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn verify_vocab(&self, vocab_hash: &str) -> Result<(), CheckpointError> {
        if self.vocab_hash != vocab_hash {
            return Err(CheckpointError::Mismatch {
                what: "vocabulary hash",
                expected: self.vocab_hash.clone(),
                found: vocab_hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn verify_embeddings(&self, source: &str) -> Result<(), CheckpointError> {
        if self.embedding_source != source {
            return Err(CheckpointError::Mismatch {
                what: "embedding source",
                expected: self.embedding_source.clone(),
                found: source.to_string(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_exact() {
        let params = ModelParams::init(
            4,
            3,
            3.7,
            &ModelConfig {
                n_factors: 2,
                window: 2,
                ..Default::default()
            },
            8,
        );
        let ck = Checkpoint::new(
            ModelState::Convmf(params),
            "abc",
            "vectors:sha256:00",
            8,
            serde_json::json!({"lambda": 0.4}),
        );
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.model.kind(), "convmf");
    }

    #[test]
    fn refuses_foreign_json_and_mismatches() {
        let ck = Checkpoint::new(
            ModelState::Offset(OffsetModel { mean_rating: 4.1 }),
            "h1",
            "",
            0,
            serde_json::Value::Null,
        );
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["format"] = "something-else".into();
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(CheckpointError::Format { .. })
        ));
        assert!(ck.verify_vocab("h1").is_ok());
        assert!(matches!(
            ck.verify_vocab("h2"),
            Err(CheckpointError::Mismatch { .. })
        ));
    }
}
