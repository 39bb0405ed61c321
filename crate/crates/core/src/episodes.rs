//! N-way K-shot episode construction.
//!
//! Training and inference episodes are configured independently by an
//! [`InconsistentPlan`], so a model can be trained on `(N1, K1)` tasks and
//! evaluated on `(N2, K2)` tasks.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{IndexedDataset, IndexedSample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EpisodeError {
    #[error("invalid episode configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("{needed}-way episodes need {needed} relations, dataset has {available}")]
    TooFewRelations { available: usize, needed: usize },
    #[error("relation {relation} has {available} samples, episodes need {needed}")]
    Capacity {
        relation: String,
        available: usize,
        needed: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Query imbalance in `[0, 1)`. Zero gives exactly `q_per_class` queries
    /// per class; larger values ramp the per-class count linearly from
    /// `q(1+skew)` for class 0 down to `q(1-skew)` for the last class.
    pub query_skew: f64,
}

impl Default for EpisodeConfig {
    /// 5-way 5-shot with 5 queries per class.
    fn default() -> Self {
        Self::new(5, 5, 5)
    }
}

impl EpisodeConfig {
    pub fn new(n_way: usize, k_shot: usize, q_per_class: usize) -> Self {
        Self {
            n_way,
            k_shot,
            q_per_class,
            query_skew: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        for (field, v) in [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("q_per_class", self.q_per_class),
        ] {
            if v == 0 {
                return Err(EpisodeError::Config {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if !(0.0..1.0).contains(&self.query_skew) {
            return Err(EpisodeError::Config {
                field: "query_skew",
                reason: format!("{} is outside [0, 1)", self.query_skew),
            });
        }
        Ok(())
    }

    /// Number of queries drawn for each local class.
    pub fn query_counts(&self) -> Vec<usize> {
        if self.query_skew == 0.0 || self.n_way == 1 {
            return vec![self.q_per_class; self.n_way];
        }
        (0..self.n_way)
            .map(|r| {
                let ramp = 1.0 - 2.0 * r as f64 / (self.n_way - 1) as f64;
                let q = self.q_per_class as f64 * (1.0 + self.query_skew * ramp);
                (q.round() as usize).max(1)
            })
            .collect()
    }

    /// Checks that every relation can supply a full class of this episode shape.
    pub fn check_capacity(&self, dataset: &IndexedDataset) -> Result<(), EpisodeError> {
        self.validate()?;
        if dataset.num_relations() < self.n_way {
            return Err(EpisodeError::TooFewRelations {
                available: dataset.num_relations(),
                needed: self.n_way,
            });
        }
        let needed = self.k_shot + self.query_counts().into_iter().max().unwrap_or(0);
        if let Some(rel) = dataset.relations.iter().find(|r| r.samples.len() < needed) {
            return Err(EpisodeError::Capacity {
                relation: rel.id.clone(),
                available: rel.samples.len(),
                needed,
            });
        }
        Ok(())
    }
}

/// Training `(N1, K1)` and inference `(N2, K2)` episode shapes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InconsistentPlan {
    pub train: EpisodeConfig,
    pub infer: EpisodeConfig,
}

impl InconsistentPlan {
    pub fn new(train: EpisodeConfig, infer: EpisodeConfig) -> Self {
        Self { train, infer }
    }

    pub fn is_consistent(&self) -> bool {
        self.train.n_way == self.infer.n_way && self.train.k_shot == self.infer.k_shot
    }
}

/// Location of a sample inside an [`IndexedDataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub relation: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeItem<'a> {
    pub sample: &'a IndexedSample,
    /// Local class index in `0..n_way`.
    pub class: usize,
    pub source: SampleRef,
}

/// One few-shot task. Support and query items are grouped by class in
/// ascending class order; the support holds exactly `k_shot` items per class.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    pub support: Vec<EpisodeItem<'a>>,
    pub query: Vec<EpisodeItem<'a>>,
    /// Relation id of each local class.
    pub class_to_relation: Vec<String>,
    pub n_way: usize,
    pub k_shot: usize,
}

impl Episode<'_> {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.class).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.class).collect()
    }
}

pub fn sample_episode<'a, R: rand::Rng + ?Sized>(
    dataset: &'a IndexedDataset,
    config: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode<'a>, EpisodeError> {
    config.check_capacity(dataset)?;
    let query_counts = config.query_counts();
    let chosen = index::sample(rng, dataset.num_relations(), config.n_way);
    let mut support = Vec::with_capacity(config.n_way * config.k_shot);
    let mut query = Vec::with_capacity(query_counts.iter().sum());
    let mut class_to_relation = Vec::with_capacity(config.n_way);
    for (class, rel_idx) in chosen.iter().enumerate() {
        let relation = &dataset.relations[rel_idx];
        class_to_relation.push(relation.id.clone());
        let take = config.k_shot + query_counts[class];
        let picks = index::sample(rng, relation.samples.len(), take);
        for (j, s) in picks.iter().enumerate() {
            let item = EpisodeItem {
                sample: &relation.samples[s],
                class,
                source: SampleRef {
                    relation: rel_idx,
                    sample: s,
                },
            };
            if j < config.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    // Queries are drawn interleaved with supports above; group them by class.
    query.sort_by_key(|q| q.class);
    Ok(Episode {
        support,
        query,
        class_to_relation,
        n_way: config.n_way,
        k_shot: config.k_shot,
    })
}

/// Episode `i` of the stream for `seed`; independent of every other index.
pub fn episode_at<'a>(
    dataset: &'a IndexedDataset,
    config: &EpisodeConfig,
    seed: u64,
    i: u64,
) -> Result<Episode<'a>, EpisodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    sample_episode(dataset, config, &mut rng)
}

/// Lazily generated, deterministic sequence of `count` episodes.
pub struct EpisodeStream<'a> {
    dataset: &'a IndexedDataset,
    config: EpisodeConfig,
    seed: u64,
    next: u64,
    count: u64,
}

impl<'a> Iterator for EpisodeStream<'a> {
    type Item = Episode<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let ep = episode_at(self.dataset, &self.config, self.seed, self.next).expect("capacity checked up front");
        self.next += 1;
        Some(ep)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.count - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for EpisodeStream<'_> {}

pub fn episode_stream<'a>(
    dataset: &'a IndexedDataset,
    config: &EpisodeConfig,
    seed: u64,
    count: usize,
) -> Result<EpisodeStream<'a>, EpisodeError> {
    config.check_capacity(dataset)?;
    Ok(EpisodeStream {
        dataset,
        config: *config,
        seed,
        next: 0,
        count: count as u64,
    })
}
