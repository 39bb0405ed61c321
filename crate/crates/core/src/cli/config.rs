//! Run configuration files.
//!
//! A config is either a JSON object or `key = value` lines with dotted keys
//! (`train.plan.train.n_way = 10`). Values are read as JSON when they parse
//! as JSON and as bare strings otherwise. `#` starts a comment line.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::CliError;
use crate::data::{
    load_embeddings, load_fewrel, synth_generate, Dataset, EmbeddingTable, IndexedDataset, SynthParams, Vocab,
};
use crate::model::{ArchConfig, ModelVariant};
use crate::training::{GridCell, GridSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "json" => Ok(Self::Json),
            _ => Err(format!("unknown report format `{s}`")),
        }
    }
}

/// Where samples and word vectors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        synth: SynthParams,
        /// Relations (taken from the end, in sorted order) kept out of
        /// training and used for evaluation. Zero evaluates on the training relations.
        #[serde(default)]
        holdout_relations: usize,
    },
    Fewrel {
        #[serde(default)]
        train_path: Option<PathBuf>,
        /// Evaluation relations; defaults to the training file.
        #[serde(default)]
        eval_path: Option<PathBuf>,
        #[serde(default)]
        embeddings_path: Option<PathBuf>,
        #[serde(default = "default_dim")]
        embedding_dim: usize,
    },
}

fn default_dim() -> usize {
    50
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic {
            synth: SynthParams::default(),
            holdout_relations: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    /// Fixed way, training shots crossed with test shots.
    #[default]
    InconsistentK,
    /// Fixed shot, training ways crossed with test ways.
    InconsistentN,
    /// Every model variant at one shape.
    Ablation,
    /// Cells listed explicitly in `cells`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomCell {
    pub id: String,
    pub variant: ModelVariant,
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "K1")]
    pub k1: usize,
    #[serde(rename = "N2")]
    pub n2: usize,
    #[serde(rename = "K2")]
    pub k2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub preset: GridPreset,
    pub variants: Vec<ModelVariant>,
    pub seeds: Vec<u64>,
    /// Way for `inconsistent_k` and `ablation`.
    pub n_way: usize,
    /// Shot for `ablation`.
    pub k_shot: usize,
    pub k1: Vec<usize>,
    pub k2: Vec<usize>,
    pub n1: Vec<usize>,
    pub n2: Vec<usize>,
    /// Shared shots for `inconsistent_n`.
    pub k: Vec<usize>,
    pub cells: Vec<CustomCell>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            preset: GridPreset::InconsistentK,
            variants: vec![ModelVariant::Proto, ModelVariant::ProtoCacl],
            seeds: vec![1],
            n_way: 5,
            k_shot: 5,
            k1: vec![5, 10, 20],
            k2: vec![1, 5, 10, 20],
            n1: vec![5, 10, 20],
            n2: vec![5, 10],
            k: vec![5, 10],
            cells: Vec::new(),
        }
    }
}

impl GridConfig {
    pub fn spec(&self, base: &TrainConfig) -> GridSpec {
        let spec = match self.preset {
            GridPreset::InconsistentK => GridSpec::merge(
                "inconsistent-k",
                self.variants
                    .iter()
                    .map(|&v| GridSpec::inconsistent_k(base, v, self.n_way, &self.k1, &self.k2))
                    .collect(),
            ),
            GridPreset::InconsistentN => GridSpec::merge(
                "inconsistent-n",
                self.variants
                    .iter()
                    .map(|&v| GridSpec::inconsistent_n(base, v, &self.n1, &self.n2, &self.k))
                    .collect(),
            ),
            GridPreset::Ablation => GridSpec::ablation(base, self.n_way, self.k_shot),
            GridPreset::Custom => GridSpec {
                name: "custom".into(),
                axes: Vec::new(),
                cells: self
                    .cells
                    .iter()
                    .map(|c| {
                        let mut cfg = *base;
                        cfg.plan.train.n_way = c.n1;
                        cfg.plan.train.k_shot = c.k1;
                        cfg.plan.infer.n_way = c.n2;
                        cfg.plan.infer.k_shot = c.k2;
                        GridCell::new(c.id.clone(), c.variant, &cfg)
                    })
                    .collect(),
            },
        };
        if spec.cells.is_empty() {
            return spec;
        }
        spec.with_seeds(&self.seeds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub formats: Vec<ReportFormat>,
    pub grid: GridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("out"),
            formats: vec![ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Json],
            grid: GridConfig::default(),
        }
    }
}

fn config_err(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{field}`: {reason}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.data {
            DataSource::Synthetic {
                synth,
                holdout_relations,
            } => {
                synth.validate().map_err(|e| config_err("data.synth", e))?;
                if *holdout_relations >= synth.num_relations {
                    return Err(config_err(
                        "data.holdout_relations",
                        format!(
                            "{holdout_relations} leaves no training relations out of {}",
                            synth.num_relations
                        ),
                    ));
                }
            }
            DataSource::Fewrel {
                train_path,
                embeddings_path,
                embedding_dim,
                ..
            } => {
                if train_path.is_none() {
                    return Err(config_err("data.train_path", "required for kind = fewrel"));
                }
                if embeddings_path.is_none() {
                    return Err(config_err("data.embeddings_path", "required for kind = fewrel"));
                }
                if *embedding_dim == 0 {
                    return Err(config_err("data.embedding_dim", "must be positive"));
                }
            }
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.formats.is_empty() {
            return Err(config_err("formats", "at least one report format is required"));
        }
        Ok(())
    }

    /// Pretty JSON of every resolved setting; itself a valid config file.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a config file's text, JSON or `key = value`.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str::<Value>(text).map_err(|e| CliError::Config(format!("malformed JSON config: {e}")))?
    } else {
        parse_key_values(text)?
    };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("`{path}`: {}", e.into_inner()))
    })
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

fn parse_key_values(text: &str) -> Result<Value, CliError> {
    let mut root = Map::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("line {}: malformed key `{key}`", lineno + 1)));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry.as_object_mut().ok_or_else(|| {
                CliError::Config(format!("line {}: `{p}` in `{key}` already holds a value", lineno + 1))
            })?;
        }
        let last = parts[parts.len() - 1].to_string();
        if node.insert(last, value).is_some() {
            return Err(CliError::Config(format!("line {}: `{key}` set twice", lineno + 1)));
        }
    }
    Ok(Value::Object(root))
}

/// Everything loaded from a [`DataSource`].
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: IndexedDataset,
    pub eval: IndexedDataset,
    pub vocab: Vocab,
    pub table: EmbeddingTable,
    pub arch: ArchConfig,
}

pub fn raw_data(source: &DataSource) -> Result<(Dataset, Option<Dataset>, EmbeddingTable), CliError> {
    match source {
        DataSource::Synthetic {
            synth,
            holdout_relations,
        } => {
            let (ds, table) = synth_generate(synth).map_err(|e| config_err("data.synth", e))?;
            if *holdout_relations == 0 {
                return Ok((ds, None, table));
            }
            let (train, eval) = ds.split_relations(ds.num_relations() - holdout_relations);
            Ok((train, Some(eval), table))
        }
        DataSource::Fewrel {
            train_path,
            eval_path,
            embeddings_path,
            embedding_dim,
        } => {
            let train_path = train_path
                .as_ref()
                .ok_or_else(|| config_err("data.train_path", "required for kind = fewrel"))?;
            let emb_path = embeddings_path
                .as_ref()
                .ok_or_else(|| config_err("data.embeddings_path", "required for kind = fewrel"))?;
            let train = load_fewrel(train_path).map_err(|e| CliError::Runtime(e.to_string()))?;
            let eval = eval_path
                .as_ref()
                .map(load_fewrel)
                .transpose()
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let table = load_embeddings(emb_path, *embedding_dim).map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok((train, eval, table))
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let (train, eval, table) = raw_data(&cfg.data)?;
    let vocab = Vocab::from_table(&table);
    let index = cfg.train.encoder.index();
    let train_idx = IndexedDataset::build(&train, &vocab, &index);
    let eval_idx = match &eval {
        Some(e) => IndexedDataset::build(e, &vocab, &index),
        None => train_idx.clone(),
    };
    for (name, ds) in [("training", &train_idx), ("evaluation", &eval_idx)] {
        if ds.skipped > 0 {
            log::warn!("{name} data: skipped {} samples with entities past max_len", ds.skipped);
        }
    }
    let arch = ArchConfig::new(&vocab, table.dim(), &cfg.train.encoder);
    Ok(Prepared {
        train: train_idx,
        eval: eval_idx,
        vocab,
        table,
        arch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_build_nested_objects() {
        let v = parse_key_values("# c\ntrain.iterations = 30000\ntrain.grad_clip = null\nout = runs/a\n").unwrap();
        assert_eq!(v["train"]["iterations"], 30000);
        assert!(v["train"]["grad_clip"].is_null());
        assert_eq!(v["out"], "runs/a");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.grad_clip = None;
        cfg.train.iterations = 30000;
        let back: RunConfig = parse_config(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = parse_config::<RunConfig>("train.iteratons = 3")
            .unwrap_err()
            .to_string();
        assert!(err.contains("iteratons"), "{err}");
    }

    #[test]
    fn missing_fewrel_path_is_named() {
        let cfg: RunConfig = parse_config("data.kind = fewrel\ndata.embeddings_path = e.txt").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("data.train_path"));
        assert_eq!(err.exit_code(), 2);
    }
}
