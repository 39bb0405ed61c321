//! CNN encoder, prototype classifier, and the auxiliary training losses.

mod checkpoint;
mod encoder;
mod episode;
mod losses;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

pub use checkpoint::{ArchConfig, Checkpoint, NamedArray, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use encoder::{encode, encode_batch};
pub use episode::{episode_loss, predict_log_probs, EpisodeLoss, LossBreakdown};
pub use losses::{
    class_logits, classify, contrastive_distance, contrastive_loss, cross_attention_prototypes,
    cross_attention_prototypes_grouped, distribution_loss, pairwise_contrastive_distance, prototypes_mean,
    prototypes_mean_grouped, support_query_distributions, DistributionDistance, DistributionMatrix, RatioLoss,
    RATIO_EPS,
};
pub use params::{AttentionParams, AttentionVars, EncoderConfig, EncoderParams, ModelParams, ParamVars, PARAM_NAMES};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("invalid model configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("checkpoint fingerprint {checkpoint} does not match architecture fingerprint {expected}")]
    FingerprintMismatch { checkpoint: String, expected: String },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which embeddings the contrastive loss is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClMode {
    Off,
    Support,
    Query,
    #[default]
    SupportAndQuery,
}

impl std::str::FromStr for ClMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Self::Off),
            "support" => Ok(Self::Support),
            "query" => Ok(Self::Query),
            "support_and_query" => Ok(Self::SupportAndQuery),
            _ => Err(format!("unknown cl_mode `{s}`")),
        }
    }
}

/// `total = λ_ce·CE + λ_dist·Dist + λ_cl·CL`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_dist: f64,
    pub lambda_cl: f64,
    pub cl_mode: ClMode,
    pub dist_distance: DistributionDistance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_dist: 0.1,
            lambda_cl: 0.1,
            cl_mode: ClMode::SupportAndQuery,
            dist_distance: DistributionDistance::SquaredEuclidean,
        }
    }
}

impl LossWeights {
    /// Classification loss only.
    pub fn ce_only() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_dist: 0.0,
            lambda_cl: 0.0,
            cl_mode: ClMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_dist", self.lambda_dist),
            ("lambda_cl", self.lambda_cl),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::Config {
                    field,
                    reason: format!("{v} is not a nonnegative finite number"),
                });
            }
        }
        if self.lambda_ce == 0.0 && self.lambda_dist == 0.0 && (self.lambda_cl == 0.0 || self.cl_mode == ClMode::Off) {
            return Err(ModelError::Config {
                field: "lambda_ce",
                reason: "at least one loss weight must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn uses_dist(&self) -> bool {
        self.lambda_dist > 0.0
    }

    pub fn uses_cl(&self) -> bool {
        self.lambda_cl > 0.0 && self.cl_mode != ClMode::Off
    }
}

/// Named model configurations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Mean prototypes, classification loss only.
    Proto,
    /// Contrastive loss on the support set.
    ProtoS,
    /// Contrastive loss on the query set.
    ProtoQ,
    /// Contrastive loss on support and query.
    ProtoSAndQ,
    /// Cross-attention (query-guided prototypes and distribution loss), no contrastive loss.
    WoCl,
    /// Cross-attention plus contrastive loss on support and query.
    #[serde(rename = "protocacl")]
    ProtoCacl,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        Self::Proto,
        Self::ProtoS,
        Self::ProtoQ,
        Self::ProtoSAndQ,
        Self::WoCl,
        Self::ProtoCacl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Proto => "proto",
            Self::ProtoS => "proto_s",
            Self::ProtoQ => "proto_q",
            Self::ProtoSAndQ => "proto_s_and_q",
            Self::WoCl => "wo_cl",
            Self::ProtoCacl => "protocacl",
        }
    }

    /// Loss weights and the cross-attention flag, keeping `base`'s nonzero λ values.
    pub fn configure(self, base: &LossWeights) -> (LossWeights, bool) {
        let with = |dist: bool, cl: ClMode| LossWeights {
            lambda_dist: if dist { base.lambda_dist } else { 0.0 },
            lambda_cl: if cl == ClMode::Off { 0.0 } else { base.lambda_cl },
            cl_mode: cl,
            ..*base
        };
        match self {
            Self::Proto => (with(false, ClMode::Off), false),
            Self::ProtoS => (with(false, ClMode::Support), false),
            Self::ProtoQ => (with(false, ClMode::Query), false),
            Self::ProtoSAndQ => (with(false, ClMode::SupportAndQuery), false),
            Self::WoCl => (with(true, ClMode::Off), true),
            Self::ProtoCacl => (with(true, ClMode::SupportAndQuery), true),
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown model variant `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_need_one_active_term() {
        assert!(LossWeights::default().validate().is_ok());
        let none = LossWeights {
            lambda_ce: 0.0,
            lambda_dist: 0.0,
            ..LossWeights::default()
        };
        assert!(none.validate().is_ok());
        let off = LossWeights {
            cl_mode: ClMode::Off,
            ..none
        };
        assert!(off.validate().is_err());
        let neg = LossWeights {
            lambda_dist: -1.0,
            ..LossWeights::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn variants_round_trip_names() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        let (w, ca) = ModelVariant::Proto.configure(&LossWeights::default());
        assert!(!ca && !w.uses_dist() && !w.uses_cl());
        let (w, ca) = ModelVariant::ProtoCacl.configure(&LossWeights::default());
        assert!(ca && w.uses_dist() && w.uses_cl());
    }
}
