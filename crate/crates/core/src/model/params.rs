//! Trainable parameters and their tape leaves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::data::{EmbeddingTable, IndexConfig, Vocab, OOV_ID, PAD_ID};
use crate::numerics::{NumArray, Tape, Var};

/// Encoder hyperparameters. The word dimension comes from the embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub pos_dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub max_len: usize,
    pub pos_clip: usize,
    pub lowercase: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            pos_dim: 5,
            hidden: 230,
            window: 3,
            max_len: IndexConfig::default().max_len,
            pos_clip: IndexConfig::default().pos_clip,
            lowercase: IndexConfig::default().lowercase,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [
            ("pos_dim", self.pos_dim),
            ("hidden", self.hidden),
            ("window", self.window),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(ModelError::Config {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn index(&self) -> IndexConfig {
        IndexConfig {
            max_len: self.max_len,
            pos_clip: self.pos_clip,
            lowercase: self.lowercase,
        }
    }

    pub fn pos_rows(&self) -> usize {
        2 * self.pos_clip + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub word_emb: NumArray,
    pub pos_emb_head: NumArray,
    pub pos_emb_tail: NumArray,
    pub conv_filters: NumArray,
    pub conv_bias: NumArray,
}

/// The linear projection `h(x) = W x + b` used by query-guided prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub proj_weight: NumArray,
    pub proj_bias: NumArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
}

pub const PARAM_NAMES: [&str; 7] = [
    "word_emb",
    "pos_emb_head",
    "pos_emb_tail",
    "conv_filters",
    "conv_bias",
    "proj_weight",
    "proj_bias",
];

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> NumArray {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    NumArray::new(shape.to_vec(), values).expect("shape matches")
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> NumArray {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, &[rows, cols], bound)
}

impl ModelParams {
    /// Fresh parameters: word vectors copied from `table` (padding and OOV rows
    /// zero), position embeddings uniform in ±0.1, Xavier-uniform filters and
    /// projection, zero biases.
    pub fn init(
        cfg: &EncoderConfig,
        vocab: &Vocab,
        table: &EmbeddingTable,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let dw = table.dim();
        let mut word = NumArray::zeros(&[vocab.len(), dw]);
        for id in 0..vocab.len() {
            if id == PAD_ID || id == OOV_ID {
                continue;
            }
            word.values_mut()[id * dw..(id + 1) * dw].copy_from_slice(table.lookup(vocab.token(id)));
        }
        let pos_rows = cfg.pos_rows();
        let width = cfg.window * (dw + 2 * cfg.pos_dim);
        let pos_emb_head = uniform(rng, &[pos_rows, cfg.pos_dim], 0.1);
        let pos_emb_tail = uniform(rng, &[pos_rows, cfg.pos_dim], 0.1);
        let conv_filters = xavier(rng, cfg.hidden, width);
        let proj_weight = xavier(rng, cfg.hidden, cfg.hidden);
        Ok(Self {
            encoder: EncoderParams {
                word_emb: word,
                pos_emb_head,
                pos_emb_tail,
                conv_filters,
                conv_bias: NumArray::zeros(&[cfg.hidden]),
            },
            attention: AttentionParams {
                proj_weight,
                proj_bias: NumArray::zeros(&[cfg.hidden]),
            },
        })
    }

    /// Arrays in [`PARAM_NAMES`] order.
    pub fn arrays(&self) -> [&NumArray; 7] {
        [
            &self.encoder.word_emb,
            &self.encoder.pos_emb_head,
            &self.encoder.pos_emb_tail,
            &self.encoder.conv_filters,
            &self.encoder.conv_bias,
            &self.attention.proj_weight,
            &self.attention.proj_bias,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut NumArray; 7] {
        [
            &mut self.encoder.word_emb,
            &mut self.encoder.pos_emb_head,
            &mut self.encoder.pos_emb_tail,
            &mut self.encoder.conv_filters,
            &mut self.encoder.conv_bias,
            &mut self.attention.proj_weight,
            &mut self.attention.proj_bias,
        ]
    }

    pub fn to_vec(&self) -> Vec<NumArray> {
        self.arrays().into_iter().cloned().collect()
    }

    /// Rebuilds parameters from arrays in [`PARAM_NAMES`] order.
    pub fn from_vec(arrays: Vec<NumArray>) -> Result<Self, ModelError> {
        let [word_emb, pos_emb_head, pos_emb_tail, conv_filters, conv_bias, proj_weight, proj_bias]: [NumArray; 7] =
            arrays.try_into().map_err(|v: Vec<NumArray>| ModelError::Contract {
                op: "ModelParams::from_vec",
                detail: format!("expected 7 arrays, got {}", v.len()),
            })?;
        let p = Self {
            encoder: EncoderParams {
                word_emb,
                pos_emb_head,
                pos_emb_tail,
                conv_filters,
                conv_bias,
            },
            attention: AttentionParams { proj_weight, proj_bias },
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<(), ModelError> {
        let e = &self.encoder;
        let bad = |detail: String| {
            Err(ModelError::Contract {
                op: "ModelParams",
                detail,
            })
        };
        if e.word_emb.rank() != 2 || e.pos_emb_head.rank() != 2 || e.conv_filters.rank() != 2 {
            return bad("embedding tables and filters must be matrices".into());
        }
        if e.pos_emb_head.shape() != e.pos_emb_tail.shape() {
            return bad("head and tail position tables differ in shape".into());
        }
        let h = e.conv_filters.shape()[0];
        let channels = e.word_emb.shape()[1] + 2 * e.pos_emb_head.shape()[1];
        if !e.conv_filters.shape()[1].is_multiple_of(channels) {
            return bad(format!(
                "filter width {} is not a multiple of {channels} channels",
                e.conv_filters.shape()[1]
            ));
        }
        if e.conv_bias.shape() != [h] {
            return bad(format!("conv_bias shape {:?}, expected [{h}]", e.conv_bias.shape()));
        }
        if self.attention.proj_weight.shape() != [h, h] || self.attention.proj_bias.shape() != [h] {
            return bad(format!("projection must be [{h}, {h}] with a [{h}] bias"));
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.arrays().iter().map(|a| a.numel()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.arrays().iter().map(|a| a.sq_norm()).sum()
    }

    /// Registers every array as a gradient-receiving leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamVars {
        let v: Vec<Var> = self.arrays().into_iter().map(|a| tape.param(a.clone())).collect();
        ParamVars::from_slice(&v)
    }

    /// Registers every array as a constant (inference only).
    pub fn to_tape_frozen(&self, tape: &mut Tape) -> ParamVars {
        let v: Vec<Var> = self.arrays().into_iter().map(|a| tape.constant(a.clone())).collect();
        ParamVars::from_slice(&v)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub word_emb: Var,
    pub pos_emb_head: Var,
    pub pos_emb_tail: Var,
    pub conv_filters: Var,
    pub conv_bias: Var,
    pub attention: AttentionVars,
}

impl ParamVars {
    /// From seven handles in [`PARAM_NAMES`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), 7, "one handle per parameter array");
        Self {
            word_emb: v[0],
            pos_emb_head: v[1],
            pos_emb_tail: v[2],
            conv_filters: v[3],
            conv_bias: v[4],
            attention: AttentionVars {
                weight: v[5],
                bias: v[6],
            },
        }
    }

    pub fn to_vec(&self) -> Vec<Var> {
        vec![
            self.word_emb,
            self.pos_emb_head,
            self.pos_emb_tail,
            self.conv_filters,
            self.conv_bias,
            self.attention.weight,
            self.attention.bias,
        ]
    }
}
