//! Conversion of samples to padded id and relative-position sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Dataset, EmbeddingTable, Sample};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;

/// Model vocabulary: padding, OOV, then the embedding-table tokens in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_table(table: &EmbeddingTable) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<oov>".to_string()];
        tokens.extend(table.tokens().iter().cloned());
        let ids = tokens.iter().enumerate().skip(2).map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Hex SHA-256 over the token list, used in checkpoint fingerprints.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub max_len: usize,
    pub pos_clip: usize,
    pub lowercase: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            max_len: 128,
            pos_clip: 40,
            lowercase: true,
        }
    }
}

/// A sample ready for the encoder. All three sequences have length `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedSample {
    pub token_ids: Vec<usize>,
    pub head_rel_pos: Vec<i32>,
    pub tail_rel_pos: Vec<i32>,
    /// Number of real (unpadded) tokens.
    pub length: usize,
}

/// Signals that a sample cannot be indexed and should be skipped.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IndexError {
    #[error("{entity} entity starts at token {start}, beyond max_len {max_len}")]
    EntityTruncated {
        entity: &'static str,
        start: usize,
        max_len: usize,
    },
    #[error("sample has no tokens")]
    Empty,
}

fn clip(offset: isize, pos_clip: usize) -> i32 {
    offset.clamp(-(pos_clip as isize), pos_clip as isize) as i32
}

pub fn index_sample(sample: &Sample, vocab: &Vocab, cfg: &IndexConfig) -> Result<IndexedSample, IndexError> {
    for (entity, span) in [("head", sample.head), ("tail", sample.tail)] {
        if span.start >= cfg.max_len {
            return Err(IndexError::EntityTruncated {
                entity,
                start: span.start,
                max_len: cfg.max_len,
            });
        }
    }
    let length = sample.tokens.len().min(cfg.max_len);
    if length == 0 {
        return Err(IndexError::Empty);
    }
    let mut token_ids = vec![PAD_ID; cfg.max_len];
    let mut head_rel_pos = vec![0; cfg.max_len];
    let mut tail_rel_pos = vec![0; cfg.max_len];
    for (i, tok) in sample.tokens.iter().take(length).enumerate() {
        token_ids[i] = if cfg.lowercase {
            vocab.id(&tok.to_lowercase())
        } else {
            vocab.id(tok)
        };
        head_rel_pos[i] = clip(i as isize - sample.head.start as isize, cfg.pos_clip);
        tail_rel_pos[i] = clip(i as isize - sample.tail.start as isize, cfg.pos_clip);
    }
    Ok(IndexedSample {
        token_ids,
        head_rel_pos,
        tail_rel_pos,
        length,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedRelation {
    pub id: String,
    pub samples: Vec<IndexedSample>,
}

/// A dataset with every sample indexed against one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedDataset {
    pub relations: Vec<IndexedRelation>,
    /// Samples dropped because an entity fell past `max_len`.
    pub skipped: usize,
}

impl IndexedDataset {
    pub fn build(dataset: &Dataset, vocab: &Vocab, cfg: &IndexConfig) -> Self {
        let mut skipped = 0;
        let mut relations = Vec::with_capacity(dataset.num_relations());
        for (id, samples) in dataset.relations() {
            let indexed: Vec<IndexedSample> = samples
                .iter()
                .filter_map(|s| match index_sample(s, vocab, cfg) {
                    Ok(x) => Some(x),
                    Err(_) => {
                        skipped += 1;
                        None
                    }
                })
                .collect();
            if indexed.is_empty() {
                log::warn!("relation {id}: every sample was skipped during indexing");
                continue;
            }
            relations.push(IndexedRelation {
                id: id.clone(),
                samples: indexed,
            });
        }
        Self { relations, skipped }
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }
}
