//! Prototypes, the Euclidean-softmax classifier, and the auxiliary losses.
//!
//! All functions record onto a caller-supplied [`Tape`] so every quantity is
//! differentiable with respect to the encoder and attention parameters.

use serde::{Deserialize, Serialize};

use super::{AttentionVars, ModelError};
use crate::numerics::{NumArray, Tape, Var};

/// Added to the denominator of ratio losses.
pub const RATIO_EPS: f64 = 1e-8;

/// Distance between two rows of a [`DistributionMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionDistance {
    #[default]
    SquaredEuclidean,
    /// `Σ (p - q)(ln p - ln q)`, i.e. `KL(p‖q) + KL(q‖p)`.
    SymmetricKl,
}

/// A same-class over cross-class pair ratio.
#[derive(Debug, Clone, Copy)]
pub struct RatioLoss {
    pub value: Var,
    /// The cross-class sum was at most [`RATIO_EPS`], so the ratio is dominated by the guard.
    pub degenerate: bool,
}

/// Attention of each support row over the query set, softmax-normalized per row.
#[derive(Debug, Clone)]
pub struct DistributionMatrix {
    /// `[support, queries]`, rows sum to one.
    pub rows: Var,
    /// Raw dot products before normalization.
    pub logits: Var,
    pub class_of_row: Vec<usize>,
}

/// Number of classes, requiring every class in `0..n` to occur.
fn num_classes(op: &'static str, labels: &[usize]) -> Result<usize, ModelError> {
    let n = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; n];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(ModelError::Contract {
            op,
            detail: format!("class {missing} has no rows"),
        });
    }
    Ok(n)
}

fn indices_of(labels: &[usize], class: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect()
}

/// `[M, M]` indicator matrices of same-class (diagonal included) and cross-class ordered pairs.
fn pair_masks(labels: &[usize]) -> (NumArray, NumArray) {
    let m = labels.len();
    let mut same = NumArray::zeros(&[m, m]);
    let mut cross = NumArray::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            let target = if labels[i] == labels[j] { &mut same } else { &mut cross };
            target.values_mut()[i * m + j] = 1.0;
        }
    }
    (same, cross)
}

/// `Σ_same pair / (Σ_cross pair + ε)` over an `[M, M]` matrix of pair values.
fn pair_ratio(tape: &mut Tape, pairs: Var, labels: &[usize], op: &'static str) -> Result<RatioLoss, ModelError> {
    if num_classes(op, labels)? < 2 {
        return Err(ModelError::Contract {
            op,
            detail: "needs at least two classes".into(),
        });
    }
    let (same, cross) = pair_masks(labels);
    let same = tape.constant(same);
    let cross = tape.constant(cross);
    let num = tape.mul(pairs, same)?;
    let num = tape.sum(num)?;
    let den = tape.mul(pairs, cross)?;
    let den = tape.sum(den)?;
    let degenerate = tape.value(den).item() <= RATIO_EPS;
    let den = tape.shift(den, RATIO_EPS)?;
    let value = tape.div(num, den)?;
    Ok(RatioLoss { value, degenerate })
}

/// Squared distances between all rows of `x` (`[R, D]`) as an `[R, R]` matrix.
fn pairwise_row_diff(tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
    let shape = tape.value(x).shape().to_vec();
    let (r, d) = (shape[0], shape[1]);
    let a = tape.reshape(x, &[r, 1, d])?;
    let b = tape.reshape(x, &[1, r, d])?;
    Ok(tape.sub(a, b)?)
}

/// Class-mean prototypes `[N, H]` for arbitrary label order.
pub fn prototypes_mean(tape: &mut Tape, support: Var, labels: &[usize]) -> Result<Var, ModelError> {
    let n = num_classes("prototypes_mean", labels)?;
    if tape.value(support).shape().first() != Some(&labels.len()) {
        return Err(ModelError::Contract {
            op: "prototypes_mean",
            detail: format!(
                "{} labels for support of shape {:?}",
                labels.len(),
                tape.value(support).shape()
            ),
        });
    }
    let h = tape.value(support).shape()[1];
    let mut rows = Vec::with_capacity(n);
    for c in 0..n {
        let members = tape.gather_rows(support, &indices_of(labels, c))?;
        let mean = tape.mean_axis(members, 0)?;
        rows.push(tape.reshape(mean, &[1, h])?);
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Class-mean prototypes for a support grouped as `n` consecutive blocks of `k` rows.
pub fn prototypes_mean_grouped(tape: &mut Tape, support: Var, n: usize, k: usize) -> Result<Var, ModelError> {
    let h = tape.value(support).shape()[1];
    let grouped = tape.reshape(support, &[n, k, h])?;
    Ok(tape.mean_axis(grouped, 1)?)
}

/// Logits `-‖q - c‖²` as `[M, N]`. `prototypes` is either shared (`[N, H]`)
/// or per query (`[M, N, H]`).
pub fn class_logits(tape: &mut Tape, queries: Var, prototypes: Var) -> Result<Var, ModelError> {
    let qs = tape.value(queries).shape().to_vec();
    let ps = tape.value(prototypes).shape().to_vec();
    let (m, h) = (qs[0], qs[1]);
    let protos = match ps.len() {
        2 => tape.reshape(prototypes, &[1, ps[0], ps[1]])?,
        3 => prototypes,
        _ => {
            return Err(ModelError::Contract {
                op: "class_logits",
                detail: format!("prototype shape {ps:?}"),
            })
        }
    };
    let q = tape.reshape(queries, &[m, 1, h])?;
    let diff = tape.sub(q, protos)?;
    let sq = tape.square(diff)?;
    let dist = tape.sum_axis(sq, 2)?;
    Ok(tape.neg(dist)?)
}

/// Class probabilities `[N]` of one query embedding `[H]`.
pub fn classify(tape: &mut Tape, query: Var, prototypes: Var) -> Result<Var, ModelError> {
    let h = tape.value(query).numel();
    let q = tape.reshape(query, &[1, h])?;
    let logits = class_logits(tape, q, prototypes)?;
    let n = tape.value(logits).numel();
    let logits = tape.reshape(logits, &[n])?;
    Ok(tape.softmax(logits, 0)?)
}

/// Row-wise softmax of support·queryᵀ.
pub fn support_query_distributions(
    tape: &mut Tape,
    support: Var,
    labels: &[usize],
    queries: Var,
) -> Result<DistributionMatrix, ModelError> {
    let q = tape.value(queries).shape()[0];
    if q < 2 {
        return Err(ModelError::Config {
            field: "q_per_class",
            reason: format!("support-to-query distributions need at least 2 queries, got {q}"),
        });
    }
    let qt = tape.transpose(queries)?;
    let logits = tape.matmul(support, qt)?;
    let rows = tape.softmax(logits, 1)?;
    Ok(DistributionMatrix {
        rows,
        logits,
        class_of_row: labels.to_vec(),
    })
}

/// Intra-class over inter-class distribution distance.
pub fn distribution_loss(
    tape: &mut Tape,
    dists: &DistributionMatrix,
    distance: DistributionDistance,
) -> Result<RatioLoss, ModelError> {
    let pairs = match distance {
        DistributionDistance::SquaredEuclidean => {
            let diff = pairwise_row_diff(tape, dists.rows)?;
            let sq = tape.square(diff)?;
            tape.sum_axis(sq, 2)?
        }
        DistributionDistance::SymmetricKl => {
            let logp = tape.log_softmax(dists.logits, 1)?;
            let dp = pairwise_row_diff(tape, dists.rows)?;
            let dl = pairwise_row_diff(tape, logp)?;
            let prod = tape.mul(dp, dl)?;
            tape.sum_axis(prod, 2)?
        }
    };
    pair_ratio(tape, pairs, &dists.class_of_row, "distribution_loss")
}

fn project(tape: &mut Tape, x: Var, attn: &AttentionVars, weight_t: Var) -> Result<Var, ModelError> {
    let _ = attn.weight;
    let p = tape.matmul(x, weight_t)?;
    Ok(tape.add(p, attn.bias)?)
}

/// Query-guided prototypes `[N, H]` for a single query embedding `[H]`.
///
/// For class `r`, `e_i = Σ tanh(h(s_i) ⊙ h(q))`, `α = softmax(e)` over that
/// class's support rows, and the prototype is `Σ α_i s_i`.
pub fn cross_attention_prototypes(
    tape: &mut Tape,
    support: Var,
    labels: &[usize],
    query: Var,
    attn: &AttentionVars,
) -> Result<Var, ModelError> {
    let n = num_classes("cross_attention_prototypes", labels)?;
    let h = tape.value(query).numel();
    let wt = tape.transpose(attn.weight)?;
    let q = tape.reshape(query, &[1, h])?;
    let pq = project(tape, q, attn, wt)?;
    let pq = tape.reshape(pq, &[h])?;
    let mut rows = Vec::with_capacity(n);
    for c in 0..n {
        let idx = indices_of(labels, c);
        let members = tape.gather_rows(support, &idx)?;
        let ps = project(tape, members, attn, wt)?;
        let prod = tape.mul(ps, pq)?;
        let th = tape.tanh(prod)?;
        let e = tape.sum_axis(th, 1)?;
        let alpha = tape.softmax(e, 0)?;
        let alpha = tape.reshape(alpha, &[1, idx.len()])?;
        rows.push(tape.matmul(alpha, members)?);
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Query-guided prototypes for every query at once: `[M, N, H]`.
///
/// `support` must hold `n` consecutive blocks of `k` rows, one block per class.
pub fn cross_attention_prototypes_grouped(
    tape: &mut Tape,
    support: Var,
    n: usize,
    k: usize,
    queries: Var,
    attn: &AttentionVars,
) -> Result<Var, ModelError> {
    let m = tape.value(queries).shape()[0];
    let h = tape.value(queries).shape()[1];
    let wt = tape.transpose(attn.weight)?;
    let ps = project(tape, support, attn, wt)?;
    let pq = project(tape, queries, attn, wt)?;
    let pq = tape.reshape(pq, &[m, 1, h])?;
    let ps = tape.reshape(ps, &[1, n * k, h])?;
    let prod = tape.mul(pq, ps)?;
    let th = tape.tanh(prod)?;
    let e = tape.sum_axis(th, 2)?;
    let e = tape.reshape(e, &[m, n, k])?;
    let alpha = tape.softmax(e, 2)?;
    let alpha = tape.reshape(alpha, &[m, n, k, 1])?;
    let s = tape.reshape(support, &[1, n, k, h])?;
    let weighted = tape.mul(alpha, s)?;
    Ok(tape.sum_axis(weighted, 2)?)
}

/// `1 / (1 + exp(cos(a, b)))`.
pub fn contrastive_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var, ModelError> {
    let na = tape.l2_normalize(a)?;
    let nb = tape.l2_normalize(b)?;
    let prod = tape.mul(na, nb)?;
    let cos = tape.sum(prod)?;
    let neg = tape.neg(cos)?;
    Ok(tape.sigmoid(neg)?)
}

/// [`contrastive_distance`] between every pair of rows, `[M, M]`.
pub fn pairwise_contrastive_distance(tape: &mut Tape, embs: Var) -> Result<Var, ModelError> {
    let xn = tape.l2_normalize(embs)?;
    let xt = tape.transpose(xn)?;
    let cos = tape.matmul(xn, xt)?;
    let neg = tape.neg(cos)?;
    Ok(tape.sigmoid(neg)?)
}

/// `Σ_same exp(dis) / (Σ_cross exp(dis) + ε)` over ordered pairs of rows.
pub fn contrastive_loss(tape: &mut Tape, embs: Var, labels: &[usize]) -> Result<RatioLoss, ModelError> {
    if tape.value(embs).shape().first() != Some(&labels.len()) {
        return Err(ModelError::Contract {
            op: "contrastive_loss",
            detail: format!(
                "{} labels for embeddings of shape {:?}",
                labels.len(),
                tape.value(embs).shape()
            ),
        });
    }
    let dis = pairwise_contrastive_distance(tape, embs)?;
    let e = tape.exp(dis)?;
    pair_ratio(tape, e, labels, "contrastive_loss")
}
