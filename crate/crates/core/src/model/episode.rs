//! The weighted episode objective.

use super::losses::{
    class_logits, contrastive_loss, cross_attention_prototypes_grouped, distribution_loss, prototypes_mean_grouped,
    support_query_distributions, RatioLoss,
};
use super::{encode_batch, ClMode, EncoderConfig, LossWeights, ModelError, ParamVars};
use crate::data::IndexedSample;
use crate::episodes::Episode;
use crate::numerics::{NumArray, Tape, Var};

/// Scalar values of each loss term. Inactive terms are reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dist: f64,
    pub cl: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeLoss {
    pub total: Var,
    pub ce: Var,
    pub dist: Option<RatioLoss>,
    pub cl: Option<RatioLoss>,
    /// `[queries, n_way]` log class probabilities.
    pub log_probs: Var,
}

impl EpisodeLoss {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            ce: tape.value(self.ce).item(),
            dist: self.dist.map_or(0.0, |d| tape.value(d.value).item()),
            cl: self.cl.map_or(0.0, |c| tape.value(c.value).item()),
            total: tape.value(self.total).item(),
        }
    }

    /// `[queries, n_way]` class probabilities.
    pub fn probs(&self, tape: &Tape) -> NumArray {
        tape.value(self.log_probs).map(f64::exp)
    }
}

fn check_layout(episode: &Episode) -> Result<(), ModelError> {
    let k = episode.k_shot;
    if episode.support.len() != episode.n_way * k || episode.query.is_empty() {
        return Err(ModelError::Contract {
            op: "episode_loss",
            detail: format!(
                "support of {} items and {} queries for {}-way {k}-shot",
                episode.support.len(),
                episode.query.len(),
                episode.n_way
            ),
        });
    }
    if episode.support.iter().enumerate().any(|(i, s)| s.class != i / k) {
        return Err(ModelError::Contract {
            op: "episode_loss",
            detail: "support must be grouped by class in ascending order".into(),
        });
    }
    if episode.query.iter().any(|q| q.class >= episode.n_way) {
        return Err(ModelError::Contract {
            op: "episode_loss",
            detail: "query class outside the episode".into(),
        });
    }
    Ok(())
}

struct Embedded {
    support: Var,
    query: Var,
    log_probs: Var,
}

fn embed_and_score(
    tape: &mut Tape,
    episode: &Episode,
    params: &ParamVars,
    cfg: &EncoderConfig,
    use_cross_attention: bool,
) -> Result<Embedded, ModelError> {
    check_layout(episode)?;
    let (n, k) = (episode.n_way, episode.k_shot);
    let nk = episode.support.len();
    let m = episode.query.len();
    let samples: Vec<&IndexedSample> = episode.support.iter().chain(&episode.query).map(|i| i.sample).collect();
    let all = encode_batch(tape, params, &samples, cfg)?;
    let support = tape.gather_rows(all, &(0..nk).collect::<Vec<_>>())?;
    let query = tape.gather_rows(all, &(nk..nk + m).collect::<Vec<_>>())?;
    let prototypes = if use_cross_attention {
        cross_attention_prototypes_grouped(tape, support, n, k, query, &params.attention)?
    } else {
        prototypes_mean_grouped(tape, support, n, k)?
    };
    let logits = class_logits(tape, query, prototypes)?;
    let log_probs = tape.log_softmax(logits, 1)?;
    Ok(Embedded {
        support,
        query,
        log_probs,
    })
}

/// Records the full objective for one episode.
///
/// Cross-entropy uses query-guided prototypes when `use_cross_attention` is
/// set and class means otherwise. Terms with a zero weight are not recorded.
pub fn episode_loss(
    tape: &mut Tape,
    episode: &Episode,
    params: &ParamVars,
    cfg: &EncoderConfig,
    weights: &LossWeights,
    use_cross_attention: bool,
) -> Result<EpisodeLoss, ModelError> {
    weights.validate()?;
    let emb = embed_and_score(tape, episode, params, cfg, use_cross_attention)?;
    let m = episode.query.len();
    let n = episode.n_way;
    let mut onehot = NumArray::zeros(&[m, n]);
    for (i, q) in episode.query.iter().enumerate() {
        onehot.values_mut()[i * n + q.class] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let picked = tape.mul(emb.log_probs, onehot)?;
    let picked = tape.sum(picked)?;
    let ce = tape.scale(picked, -1.0 / m as f64)?;
    let mut total = tape.scale(ce, weights.lambda_ce)?;

    let support_labels = episode.support_labels();
    let dist = if weights.uses_dist() {
        let d = support_query_distributions(tape, emb.support, &support_labels, emb.query)?;
        let loss = distribution_loss(tape, &d, weights.dist_distance)?;
        let term = tape.scale(loss.value, weights.lambda_dist)?;
        total = tape.add(total, term)?;
        Some(loss)
    } else {
        None
    };

    let cl = if weights.uses_cl() {
        let query_labels = episode.query_labels();
        let (embs, labels) = match weights.cl_mode {
            ClMode::Support => (emb.support, support_labels),
            ClMode::Query => (emb.query, query_labels),
            ClMode::SupportAndQuery => {
                let both = tape.concat(&[emb.support, emb.query], 0)?;
                (both, support_labels.into_iter().chain(query_labels).collect())
            }
            ClMode::Off => unreachable!("uses_cl is false for ClMode::Off"),
        };
        let loss = contrastive_loss(tape, embs, &labels)?;
        let term = tape.scale(loss.value, weights.lambda_cl)?;
        total = tape.add(total, term)?;
        Some(loss)
    } else {
        None
    };

    Ok(EpisodeLoss {
        total,
        ce,
        dist,
        cl,
        log_probs: emb.log_probs,
    })
}

/// `[queries, n_way]` log probabilities without recording any loss term.
pub fn predict_log_probs(
    tape: &mut Tape,
    episode: &Episode,
    params: &ParamVars,
    cfg: &EncoderConfig,
    use_cross_attention: bool,
) -> Result<NumArray, ModelError> {
    let emb = embed_and_score(tape, episode, params, cfg, use_cross_attention)?;
    Ok(tape.value(emb.log_probs).clone())
}
