//! Shared fixtures and plain-loop reference implementations.
#![allow(dead_code)]

use std::collections::HashSet;

use protoep::data::{
    synth_generate, EmbeddingTable, IndexedDataset, IndexedRelation, IndexedSample, SynthParams, Vocab, OOV_ID, PAD_ID,
};
use protoep::episodes::{Episode, EpisodeConfig};
use protoep::model::{EncoderConfig, ModelParams};
use protoep::numerics::NumArray;
use rand::Rng;

pub fn random_array(rng: &mut impl Rng, shape: &[usize], bound: f64) -> NumArray {
    let n = shape.iter().product();
    NumArray::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .unwrap()
}

pub fn random_sample(rng: &mut impl Rng, vocab: usize, max_len: usize, clip: usize) -> IndexedSample {
    let length = rng.random_range(1..=max_len);
    let head = rng.random_range(0..length) as i32;
    let tail = rng.random_range(0..length) as i32;
    let c = clip as i32;
    let mut token_ids = vec![PAD_ID; max_len];
    let mut head_rel_pos = vec![0; max_len];
    let mut tail_rel_pos = vec![0; max_len];
    for t in 0..length {
        token_ids[t] = if rng.random_bool(0.1) {
            OOV_ID
        } else {
            rng.random_range(2..vocab)
        };
        head_rel_pos[t] = (t as i32 - head).clamp(-c, c);
        tail_rel_pos[t] = (t as i32 - tail).clamp(-c, c);
    }
    IndexedSample {
        token_ids,
        head_rel_pos,
        tail_rel_pos,
        length,
    }
}

pub fn random_dataset(
    rng: &mut impl Rng,
    relations: usize,
    per_relation: usize,
    vocab: usize,
    max_len: usize,
    clip: usize,
) -> IndexedDataset {
    IndexedDataset {
        relations: (0..relations)
            .map(|r| IndexedRelation {
                id: format!("P{r}"),
                samples: (0..per_relation)
                    .map(|_| random_sample(rng, vocab, max_len, clip))
                    .collect(),
            })
            .collect(),
        skipped: 0,
    }
}

/// Random parameters with nonzero biases everywhere.
pub fn random_params(rng: &mut impl Rng, vocab: usize, word_dim: usize, cfg: &EncoderConfig) -> ModelParams {
    let rows = 2 * cfg.pos_clip + 1;
    let width = cfg.window * (word_dim + 2 * cfg.pos_dim);
    ModelParams::from_vec(vec![
        random_array(rng, &[vocab, word_dim], 0.5),
        random_array(rng, &[rows, cfg.pos_dim], 0.5),
        random_array(rng, &[rows, cfg.pos_dim], 0.5),
        random_array(rng, &[cfg.hidden, width], 0.5),
        random_array(rng, &[cfg.hidden], 0.2),
        random_array(rng, &[cfg.hidden, cfg.hidden], 0.5),
        random_array(rng, &[cfg.hidden], 0.2),
    ])
    .unwrap()
}

/// Encoder written as explicit loops over positions, filters, and channels.
pub fn plain_encode(p: &ModelParams, cfg: &EncoderConfig, s: &IndexedSample) -> Vec<f64> {
    let e = &p.encoder;
    let dw = e.word_emb.shape()[1];
    let dp = cfg.pos_dim;
    let channels = dw + 2 * dp;
    let clip = cfg.pos_clip as i32;
    let token = |t: usize| -> Vec<f64> {
        let mut x = e.word_emb.row(s.token_ids[t]).to_vec();
        x.extend_from_slice(e.pos_emb_head.row((s.head_rel_pos[t] + clip) as usize));
        x.extend_from_slice(e.pos_emb_tail.row((s.tail_rel_pos[t] + clip) as usize));
        x
    };
    let left = (cfg.window as isize - 1) / 2;
    let mut out = vec![f64::NEG_INFINITY; cfg.hidden];
    for t in 0..s.length {
        for (j, o_j) in out.iter_mut().enumerate() {
            let filter = e.conv_filters.row(j);
            let mut acc = e.conv_bias.values()[j];
            for o in 0..cfg.window {
                let src = t as isize + o as isize - left;
                if src < 0 || src as usize >= s.length {
                    continue;
                }
                let x = token(src as usize);
                for c in 0..channels {
                    acc += filter[o * channels + c] * x[c];
                }
            }
            *o_j = o_j.max(acc.max(0.0));
        }
    }
    out
}

/// Vanilla prototypical-network loss: class means, softmax over negative
/// squared Euclidean distances, mean negative log-likelihood of the queries.
pub fn plain_protonet_loss(p: &ModelParams, cfg: &EncoderConfig, episode: &Episode) -> f64 {
    let n = episode.n_way;
    let h = cfg.hidden;
    let mut protos = vec![vec![0.0; h]; n];
    let mut counts = vec![0usize; n];
    for item in &episode.support {
        let v = plain_encode(p, cfg, item.sample);
        for (a, b) in protos[item.class].iter_mut().zip(&v) {
            *a += b;
        }
        counts[item.class] += 1;
    }
    for (proto, &c) in protos.iter_mut().zip(&counts) {
        for a in proto.iter_mut() {
            *a /= c as f64;
        }
    }
    let mut total = 0.0;
    for item in &episode.query {
        let q = plain_encode(p, cfg, item.sample);
        let logits: Vec<f64> = protos
            .iter()
            .map(|c| -c.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[item.class];
    }
    total / episode.query.len() as f64
}

/// `Σ_same pair / (Σ_cross pair + 1e-8)` by explicit double loop.
pub fn plain_pair_ratio(n: usize, labels: &[usize], pair: impl Fn(usize, usize) -> f64) -> f64 {
    let (mut same, mut cross) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                same += pair(i, j);
            } else {
                cross += pair(i, j);
            }
        }
    }
    same / (cross + 1e-8)
}

pub fn plain_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn plain_contrastive_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    1.0 / (1.0 + cos.exp())
}

/// Brute-force L_Dist: softmax rows of support·queryᵀ, squared Euclidean row distances.
pub fn plain_distribution_loss(support: &[Vec<f64>], labels: &[usize], queries: &[Vec<f64>]) -> f64 {
    let rows: Vec<Vec<f64>> = support
        .iter()
        .map(|s| {
            let logits: Vec<f64> = queries
                .iter()
                .map(|q| s.iter().zip(q).map(|(a, b)| a * b).sum())
                .collect();
            plain_softmax(&logits)
        })
        .collect();
    plain_pair_ratio(rows.len(), labels, |i, j| {
        rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum()
    })
}

pub fn plain_contrastive_loss(embs: &[Vec<f64>], labels: &[usize]) -> f64 {
    plain_pair_ratio(embs.len(), labels, |i, j| {
        plain_contrastive_distance(&embs[i], &embs[j]).exp()
    })
}

/// Structural violations of one episode; empty when it is well formed.
pub fn episode_violations(ep: &Episode<'_>, cfg: &EpisodeConfig, ds: &IndexedDataset) -> Vec<String> {
    let mut v = Vec::new();
    if ep.support.len() != cfg.n_way * cfg.k_shot {
        v.push(format!("support size {}", ep.support.len()));
    }
    let counts = cfg.query_counts();
    for (c, &want) in counts.iter().enumerate() {
        let s = ep.support.iter().filter(|i| i.class == c).count();
        let q = ep.query.iter().filter(|i| i.class == c).count();
        if s != cfg.k_shot || q != want {
            v.push(format!("class {c}: {s} support, {q} query"));
        }
    }
    let support: HashSet<_> = ep.support.iter().map(|i| i.source).collect();
    let query: HashSet<_> = ep.query.iter().map(|i| i.source).collect();
    if support.len() != ep.support.len() || query.len() != ep.query.len() || !support.is_disjoint(&query) {
        v.push("repeated sample".into());
    }
    // local class -> relation must be a bijection consistent with every item
    let rels: HashSet<_> = ep.class_to_relation.iter().collect();
    if rels.len() != cfg.n_way || ep.class_to_relation.len() != cfg.n_way {
        v.push("class map is not a bijection".into());
    }
    for item in ep.support.iter().chain(&ep.query) {
        if ds.relations[item.source.relation].id != ep.class_to_relation[item.class] {
            v.push(format!("item of class {} from wrong relation", item.class));
        }
        if !std::ptr::eq(
            item.sample,
            &ds.relations[item.source.relation].samples[item.source.sample],
        ) {
            v.push("item does not point at its source".into());
        }
    }
    if ep.support.windows(2).any(|w| w[0].class > w[1].class) || ep.query.windows(2).any(|w| w[0].class > w[1].class) {
        v.push("items not grouped by class".into());
    }
    v
}

/// Indexed synthetic data, its vocabulary, and its word vectors.
pub fn synth_setup(params: &SynthParams, encoder: &EncoderConfig) -> (IndexedDataset, Vocab, EmbeddingTable) {
    let (ds, table) = synth_generate(params).unwrap();
    let vocab = Vocab::from_table(&table);
    (IndexedDataset::build(&ds, &vocab, &encoder.index()), vocab, table)
}

/// Encoder small enough for multi-thousand-iteration runs inside tests.
pub fn compact_encoder() -> EncoderConfig {
    EncoderConfig {
        pos_dim: 3,
        hidden: 32,
        max_len: 16,
        pos_clip: 16,
        ..EncoderConfig::default()
    }
}
