//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip decimal form, so a loaded
//! checkpoint carries bit-identical parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FitContext, Model, TrainConfig, TrainError};
use crate::corpus::LabelVocabulary;
use crate::textprep::ChunkPolicy;

pub const CHECKPOINT_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u64,
    pub config: TrainConfig,
    pub policy: ChunkPolicy,
    pub doc_token_limit: usize,
    pub label_vocab: LabelVocabulary,
    pub model: Model,
    pub best_validation_micro_f1: f64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, ctx: &FitContext, model: Model, best_f1: f64, epoch: usize) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: *config,
            policy: ctx.policy,
            doc_token_limit: ctx.doc_token_limit,
            label_vocab: ctx.label_vocab.clone(),
            model,
            best_validation_micro_f1: best_f1,
            epoch,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| TrainError::Parse(e.to_string()))?;
        let found = value.get("schema_version").and_then(serde_json::Value::as_u64);
        if found != Some(CHECKPOINT_SCHEMA_VERSION) {
            return Err(TrainError::SchemaVersionMismatch { found, expected: CHECKPOINT_SCHEMA_VERSION });
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| TrainError::Parse(e.to_string()))?;
        ckpt.validate().map_err(TrainError::InvalidCheckpoint)?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<(), String> {
        let sac = &self.model.sac;
        let (h, c) = (sac.h, sac.c);
        if h == 0 || c == 0 {
            return Err("classifier dimensions must be positive".into());
        }
        if c != self.label_vocab.len() {
            return Err(format!("{c} classifier labels but {} vocabulary labels", self.label_vocab.len()));
        }
        if sac.s.len() != h * c || sac.w.len() != c * h || sac.bias.len() != c {
            return Err("classifier tensor shapes disagree with h and c".into());
        }
        if !sac.is_finite() {
            return Err("classifier parameters are not finite".into());
        }
        match (&self.model.encoder, &self.model.token_vocab) {
            (None, None) => {}
            (Some(enc), Some(vocab)) => {
                if enc.h != h {
                    return Err(format!("encoder width {} differs from classifier width {h}", enc.h));
                }
                if enc.vocab_size != vocab.size() || enc.token_embeddings.len() != enc.vocab_size * h {
                    return Err("embedding table shape disagrees with token vocabulary".into());
                }
                if enc.projection.len() != h * h || enc.proj_bias.len() != h {
                    return Err("projection shape disagrees with encoder width".into());
                }
                if !enc.is_finite() {
                    return Err("encoder parameters are not finite".into());
                }
            }
            _ => return Err("encoder parameters and token vocabulary must be present together".into()),
        }
        self.policy.validate().map_err(|e| e.to_string())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    fs::write(path, ckpt.to_json()).map_err(|source| TrainError::Io { path: path.to_owned(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_owned(), source })?;
    Checkpoint::from_json(&text)
}
