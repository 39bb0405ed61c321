//! JSON parameter checkpoints.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, ModelError, ModelParams, PARAM_NAMES};
use crate::data::Vocab;
use crate::numerics::NumArray;

pub const CHECKPOINT_FORMAT: &str = "protoep-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything that determines parameter shapes and the meaning of each row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub vocab_digest: String,
    pub word_dim: usize,
    pub encoder: EncoderConfig,
}

impl ArchConfig {
    pub fn new(vocab: &Vocab, word_dim: usize, encoder: &EncoderConfig) -> Self {
        Self {
            vocab_size: vocab.len(),
            vocab_digest: vocab.digest(),
            word_dim,
            encoder: *encoder,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("arch config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn expected_shapes(&self) -> [Vec<usize>; 7] {
        let e = &self.encoder;
        let rows = e.pos_rows();
        let width = e.window * (self.word_dim + 2 * e.pos_dim);
        [
            vec![self.vocab_size, self.word_dim],
            vec![rows, e.pos_dim],
            vec![rows, e.pos_dim],
            vec![e.hidden, width],
            vec![e.hidden],
            vec![e.hidden, e.hidden],
            vec![e.hidden],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    #[serde(flatten)]
    pub array: NumArray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub arch: ArchConfig,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, arch: &ArchConfig) -> Result<Self, ModelError> {
        check_against(params, arch)?;
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            fingerprint: arch.fingerprint(),
            arch: arch.clone(),
            arrays: PARAM_NAMES
                .iter()
                .zip(params.to_vec())
                .map(|(name, array)| NamedArray {
                    name: name.to_string(),
                    array,
                })
                .collect(),
        })
    }

    /// Parameters, after checking the stored fingerprint against `expected`.
    pub fn params(&self, expected: &ArchConfig) -> Result<ModelParams, ModelError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Contract {
                op: "checkpoint",
                detail: format!("unsupported format {} v{}", self.format, self.version),
            });
        }
        let want = expected.fingerprint();
        if self.fingerprint != want || self.arch.fingerprint() != want {
            return Err(ModelError::FingerprintMismatch {
                checkpoint: self.fingerprint.clone(),
                expected: want,
            });
        }
        self.params_unchecked()
    }

    /// Parameters for the architecture recorded in the checkpoint itself.
    pub fn params_unchecked(&self) -> Result<ModelParams, ModelError> {
        let names: Vec<&str> = self.arrays.iter().map(|a| a.name.as_str()).collect();
        if names != PARAM_NAMES {
            return Err(ModelError::Contract {
                op: "checkpoint",
                detail: format!("array names {names:?}, expected {PARAM_NAMES:?}"),
            });
        }
        let params = ModelParams::from_vec(self.arrays.iter().map(|a| a.array.clone()).collect())?;
        check_against(&params, &self.arch)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn check_against(params: &ModelParams, arch: &ArchConfig) -> Result<(), ModelError> {
    for ((name, array), want) in PARAM_NAMES.iter().zip(params.arrays()).zip(arch.expected_shapes()) {
        if array.shape() != want.as_slice() {
            return Err(ModelError::Contract {
                op: "checkpoint",
                detail: format!("{name} has shape {:?}, architecture expects {want:?}", array.shape()),
            });
        }
    }
    Ok(())
}
