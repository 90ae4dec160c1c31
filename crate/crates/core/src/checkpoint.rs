//! Versioned JSON checkpoints.
//!
//! A checkpoint holds everything needed to score unseen patients: the
//! fitted vocabulary, taxonomy table and word embeddings alongside the
//! model parameters. The layout is
//! described in the project README.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, PreprocessConfig, TaxonomyTable, Vocab};
use crate::error::{Error, Result};
use crate::hypergraph::FeatureScale;
use crate::model::ModelParams;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub artifact_version: String,
    pub variant: String,
    pub seed: u64,
    pub vocab_hash: String,
    pub preprocess: PreprocessConfig,
    pub vocab: Vocab,
    pub taxonomies: TaxonomyTable,
    pub scale: FeatureScale,
    pub embeddings: EmbeddingTable,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        seed: u64,
        preprocess: PreprocessConfig,
        vocab: Vocab,
        taxonomies: TaxonomyTable,
        scale: FeatureScale,
        embeddings: EmbeddingTable,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            variant: params.variant.name.clone(),
            seed,
            vocab_hash: vocab.hash(),
            preprocess,
            vocab,
            taxonomies,
            scale,
            embeddings,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.vocab.reindex();
        ckpt.taxonomies = TaxonomyTable::new(ckpt.taxonomies.names().to_vec());
        if ckpt.vocab.hash() != ckpt.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        if ckpt.embeddings.matrix.rows() != ckpt.vocab.len() {
            return Err(Error::Checkpoint(
                "embedding rows do not match vocabulary".into(),
            ));
        }
        Ok(ckpt)
    }
}
