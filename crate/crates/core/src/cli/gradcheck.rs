//! Finite-difference check of every loss on a tiny synthetic episode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synth_generate, IndexedDataset, SynthParams, Vocab};
use crate::episodes::{episode_at, EpisodeConfig};
use crate::model::{episode_loss, ClMode, EncoderConfig, LossWeights, ModelError, ModelParams, ParamVars};
use crate::numerics::{grad_check, GradCheckReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub vocab_size: usize,
    pub sentence_len: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            eps: 1e-5,
            tolerance: 1e-4,
            n_way: 2,
            k_shot: 2,
            q_per_class: 2,
            word_dim: 4,
            pos_dim: 2,
            hidden: 8,
            window: 3,
            vocab_size: 12,
            sentence_len: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

impl LossCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.report.max_relative_error <= tolerance
    }
}

/// Checks cross-entropy (query-guided prototypes), the distribution loss,
/// the contrastive loss, and the default weighted combination over every
/// parameter array.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<LossCheck>, ModelError> {
    let bad = |e: &dyn std::fmt::Display| ModelError::Config {
        field: "gradcheck",
        reason: e.to_string(),
    };
    let synth = SynthParams::new(
        cfg.n_way,
        cfg.k_shot + cfg.q_per_class,
        cfg.vocab_size,
        cfg.sentence_len,
        1.0,
        cfg.seed,
    )
    .with_dim(cfg.word_dim);
    let (ds, table) = synth_generate(&synth).map_err(|e| bad(&e))?;
    let vocab = Vocab::from_table(&table);
    let encoder = EncoderConfig {
        pos_dim: cfg.pos_dim,
        hidden: cfg.hidden,
        window: cfg.window,
        max_len: cfg.sentence_len,
        pos_clip: cfg.sentence_len,
        lowercase: true,
    };
    let indexed = IndexedDataset::build(&ds, &vocab, &encoder.index());
    let episode_cfg = EpisodeConfig::new(cfg.n_way, cfg.k_shot, cfg.q_per_class);
    let episode = episode_at(&indexed, &episode_cfg, cfg.seed, 0).map_err(|e| bad(&e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(&encoder, &vocab, &table, &mut rng)?.to_vec();

    let only = |ce: f64, dist: f64, cl: f64| LossWeights {
        lambda_ce: ce,
        lambda_dist: dist,
        lambda_cl: cl,
        cl_mode: ClMode::SupportAndQuery,
        ..LossWeights::default()
    };
    let cases = [
        ("ce", only(1.0, 0.0, 0.0)),
        ("dist", only(0.0, 1.0, 0.0)),
        ("cl", only(0.0, 0.0, 1.0)),
        ("combined", LossWeights::default()),
    ];
    cases
        .into_iter()
        .map(|(loss, weights)| {
            let report = grad_check(
                |tape, vars| -> Result<_, ModelError> {
                    let pv = ParamVars::from_slice(vars);
                    Ok(episode_loss(tape, &episode, &pv, &encoder, &weights, true)?.total)
                },
                &params,
                cfg.eps,
            )?;
            Ok(LossCheck { loss, report })
        })
        .collect()
}
