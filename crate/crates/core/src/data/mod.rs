//! Relation-classification corpora, word vectors, and model-ready indexing.

mod embeddings;
mod fewrel;
mod index;
mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embeddings::{load_embeddings, parse_embeddings, write_embeddings, EmbeddingTable};
pub use fewrel::{load_fewrel, parse_fewrel, to_fewrel_json, write_fewrel};
pub use index::{
    index_sample, IndexConfig, IndexError, IndexedDataset, IndexedRelation, IndexedSample, Vocab, OOV_ID, PAD_ID,
};
pub use synth::{synth_generate, SynthParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: relation {relation}, instance {index}: {reason}")]
    Record {
        path: PathBuf,
        relation: String,
        index: usize,
        reason: String,
    },
    #[error("{path}:{line}: {reason}")]
    EmbeddingParse { path: PathBuf, line: usize, reason: String },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
}

/// Token range `start..end` of an entity mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// One sentence with its head and tail entity mentions and relation label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<String>,
    pub head: Span,
    pub tail: Span,
    pub relation: String,
}

impl Sample {
    pub fn new(tokens: Vec<String>, head: Span, tail: Span, relation: impl Into<String>) -> Result<Self, DataError> {
        for (name, span) in [("head", head), ("tail", tail)] {
            if span.is_empty() || span.end > tokens.len() {
                return Err(DataError::InvalidSample(format!(
                    "{name} span {}..{} invalid for {} tokens",
                    span.start,
                    span.end,
                    tokens.len()
                )));
            }
        }
        Ok(Self {
            tokens,
            head,
            tail,
            relation: relation.into(),
        })
    }
}

/// Samples grouped by relation id, in sorted relation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    relations: BTreeMap<String, Vec<Sample>>,
}

impl Dataset {
    pub fn new(relations: BTreeMap<String, Vec<Sample>>) -> Result<Self, DataError> {
        for (id, samples) in &relations {
            if samples.is_empty() {
                return Err(DataError::InvalidDataset(format!("relation {id} has no samples")));
            }
            if let Some(s) = samples.iter().find(|s| &s.relation != id) {
                return Err(DataError::InvalidDataset(format!(
                    "sample labelled {} stored under relation {id}",
                    s.relation
                )));
            }
        }
        Ok(Self { relations })
    }

    pub fn relations(&self) -> &BTreeMap<String, Vec<Sample>> {
        &self.relations
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_samples(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    pub fn get(&self, relation: &str) -> Option<&[Sample]> {
        self.relations.get(relation).map(Vec::as_slice)
    }

    /// Splits off the first `count` relations (in sorted order) from the rest.
    pub fn split_relations(&self, count: usize) -> (Dataset, Dataset) {
        let mut first = BTreeMap::new();
        let mut rest = BTreeMap::new();
        for (i, (id, samples)) in self.relations.iter().enumerate() {
            let target = if i < count { &mut first } else { &mut rest };
            target.insert(id.clone(), samples.clone());
        }
        (Dataset { relations: first }, Dataset { relations: rest })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn sample_rejects_bad_spans() {
        assert!(Sample::new(toks(3), Span::new(0, 1), Span::new(2, 3), "r").is_ok());
        assert!(Sample::new(toks(3), Span::new(1, 1), Span::new(2, 3), "r").is_err());
        assert!(Sample::new(toks(3), Span::new(0, 1), Span::new(2, 4), "r").is_err());
        // overlapping mentions are allowed
        assert!(Sample::new(toks(3), Span::new(0, 2), Span::new(1, 3), "r").is_ok());
    }

    #[test]
    fn dataset_checks_labels_and_emptiness() {
        let s = Sample::new(toks(2), Span::new(0, 1), Span::new(1, 2), "a").unwrap();
        let mut map = BTreeMap::new();
        map.insert("b".to_string(), vec![s.clone()]);
        assert!(Dataset::new(map).is_err());
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), vec![]);
        assert!(Dataset::new(map).is_err());
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), vec![s]);
        assert_eq!(Dataset::new(map).unwrap().num_samples(), 1);
    }
}
