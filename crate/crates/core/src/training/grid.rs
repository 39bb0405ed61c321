//! Experiment grids over training and evaluation episode shapes.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig, TrainOutput, TrainingError};
use crate::data::{EmbeddingTable, IndexedDataset, Vocab};
use crate::episodes::EpisodeConfig;
use crate::model::ModelVariant;

/// A coordinate that varies across the cells of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    N1,
    K1,
    N2,
    K2,
    Variant,
    Seed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub id: String,
    pub variant: ModelVariant,
    /// Fully resolved: loss weights and the cross-attention flag already reflect `variant`.
    pub config: TrainConfig,
}

impl GridCell {
    pub fn new(id: impl Into<String>, variant: ModelVariant, base: &TrainConfig) -> Self {
        let (weights, use_cross_attention) = variant.configure(&base.weights);
        Self {
            id: id.into(),
            variant,
            config: TrainConfig {
                weights,
                use_cross_attention,
                ..*base
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub name: String,
    pub axes: Vec<GridAxis>,
    pub cells: Vec<GridCell>,
}

fn shape_id(variant: ModelVariant, n1: usize, n2: usize, k1: usize, k2: usize) -> String {
    format!("{variant}/{n1}-{n2}-{k1}-{k2}")
}

fn with_plan(base: &TrainConfig, n1: usize, k1: usize, n2: usize, k2: usize) -> TrainConfig {
    let mut cfg = *base;
    cfg.plan.train = EpisodeConfig {
        n_way: n1,
        k_shot: k1,
        ..base.plan.train
    };
    cfg.plan.infer = EpisodeConfig {
        n_way: n2,
        k_shot: k2,
        ..base.plan.infer
    };
    cfg
}

impl GridSpec {
    /// Fixed way `n`, every training shot crossed with every test shot.
    pub fn inconsistent_k(base: &TrainConfig, variant: ModelVariant, n: usize, k1s: &[usize], k2s: &[usize]) -> Self {
        let mut cells = Vec::new();
        for &k1 in k1s {
            for &k2 in k2s {
                let cfg = with_plan(base, n, k1, n, k2);
                cells.push(GridCell::new(shape_id(variant, n, n, k1, k2), variant, &cfg));
            }
        }
        Self {
            name: format!("inconsistent-k-{variant}-n{n}"),
            axes: vec![GridAxis::K1, GridAxis::K2],
            cells,
        }
    }

    /// Fixed shot, training ways `n1s` crossed with `k_values` and test ways `n2s`.
    pub fn inconsistent_n(
        base: &TrainConfig,
        variant: ModelVariant,
        n1s: &[usize],
        n2s: &[usize],
        k_values: &[usize],
    ) -> Self {
        let mut cells = Vec::new();
        for &n1 in n1s {
            for &k in k_values {
                for &n2 in n2s {
                    let cfg = with_plan(base, n1, k, n2, k);
                    cells.push(GridCell::new(shape_id(variant, n1, n2, k, k), variant, &cfg));
                }
            }
        }
        Self {
            name: format!("inconsistent-n-{variant}"),
            axes: vec![GridAxis::N1, GridAxis::N2],
            cells,
        }
    }

    /// 5-way, training shots {5, 10, 20} by test shots {1, 5, 10, 20}.
    pub fn table_inconsistent_k(base: &TrainConfig, variant: ModelVariant) -> Self {
        Self::inconsistent_k(base, variant, 5, &[5, 10, 20], &[1, 5, 10, 20])
    }

    /// Training ways {5, 10, 20} by shots {5, 10} by test ways {5, 10}.
    pub fn table_inconsistent_n(base: &TrainConfig, variant: ModelVariant) -> Self {
        Self::inconsistent_n(base, variant, &[5, 10, 20], &[5, 10], &[5, 10])
    }

    /// One cell per [`ModelVariant`] at a consistent `n`-way `k`-shot shape.
    pub fn ablation(base: &TrainConfig, n: usize, k: usize) -> Self {
        let cfg = with_plan(base, n, k, n, k);
        Self {
            name: format!("ablation-{n}way-{k}shot"),
            axes: vec![GridAxis::Variant],
            cells: ModelVariant::ALL
                .into_iter()
                .map(|v| GridCell::new(shape_id(v, n, n, k, k), v, &cfg))
                .collect(),
        }
    }

    /// Replicates every cell once per seed; ids gain an `@s<seed>` suffix.
    pub fn with_seeds(self, seeds: &[u64]) -> Self {
        let mut axes = self.axes;
        if !axes.contains(&GridAxis::Seed) {
            axes.push(GridAxis::Seed);
        }
        let cells = self
            .cells
            .iter()
            .flat_map(|c| {
                seeds.iter().map(move |&s| GridCell {
                    id: format!("{}@s{s}", c.id),
                    variant: c.variant,
                    config: TrainConfig { seed: s, ..c.config },
                })
            })
            .collect();
        Self {
            name: self.name,
            axes,
            cells,
        }
    }

    /// Concatenates cells of several specs, keeping order.
    pub fn merge(name: impl Into<String>, specs: Vec<GridSpec>) -> Self {
        let mut axes = Vec::new();
        let mut cells = Vec::new();
        for s in specs {
            for a in s.axes {
                if !axes.contains(&a) {
                    axes.push(a);
                }
            }
            cells.extend(s.cells);
        }
        Self {
            name: name.into(),
            axes,
            cells,
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let mut seen = HashSet::new();
        for c in &self.cells {
            if !seen.insert(c.id.as_str()) {
                return Err(TrainingError::Spec(format!("duplicate cell id `{}`", c.id)));
            }
            c.config
                .validate()
                .map_err(|e| TrainingError::Spec(format!("cell `{}`: {e}", c.id)))?;
        }
        Ok(())
    }
}

/// One line of a grid result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell_id: String,
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "K1")]
    pub k1: usize,
    #[serde(rename = "N2")]
    pub n2: usize,
    #[serde(rename = "K2")]
    pub k2: usize,
    pub q_per_class: usize,
    pub model_variant: String,
    pub iterations: usize,
    pub seed: u64,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub wall_seconds: f64,
    /// `ok`, or the error that stopped this cell.
    pub status: String,
}

impl GridRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

// The part of a cell's configuration that determines its trained parameters.
fn training_key(cfg: &TrainConfig) -> String {
    let mut k = *cfg;
    k.plan.infer = EpisodeConfig::default();
    k.eval_iterations = 1;
    serde_json::to_string(&k).expect("config serializes")
}

/// Trains and evaluates every cell.
///
/// Cells sharing a training configuration share one training run. Work runs
/// on the current rayon pool; rows come back in spec order and do not depend
/// on the degree of parallelism. A failing cell is reported in its row and
/// does not affect the others.
pub fn run_grid(
    train_set: &IndexedDataset,
    eval_set: &IndexedDataset,
    vocab: &Vocab,
    table: &EmbeddingTable,
    spec: &GridSpec,
) -> Result<Vec<GridRow>, TrainingError> {
    spec.validate()?;
    let mut keys: Vec<(String, TrainConfig)> = Vec::new();
    let mut key_of_cell = Vec::with_capacity(spec.cells.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    for c in &spec.cells {
        let key = training_key(&c.config);
        let i = *index.entry(key.clone()).or_insert_with(|| {
            keys.push((key, c.config));
            keys.len() - 1
        });
        key_of_cell.push(i);
    }
    log::info!(
        "grid `{}`: {} cells, {} training runs",
        spec.name,
        spec.cells.len(),
        keys.len()
    );

    let trained: Vec<(Result<TrainOutput, String>, f64)> = keys
        .par_iter()
        .map(|(_, cfg)| {
            let t = Instant::now();
            let out = train(train_set, vocab, table, cfg).map_err(|e| e.to_string());
            (out, t.elapsed().as_secs_f64())
        })
        .collect();

    let rows = spec
        .cells
        .par_iter()
        .zip(key_of_cell.par_iter())
        .map(|(cell, &k)| {
            let cfg = &cell.config;
            let (out, train_secs) = &trained[k];
            let t = Instant::now();
            let result = match out {
                Ok(out) => evaluate(
                    eval_set,
                    &out.params,
                    &cfg.encoder,
                    &cfg.plan.infer,
                    cfg.eval_iterations,
                    cfg.eval_seed(),
                    cfg.use_cross_attention,
                )
                .map_err(|e| e.to_string()),
                Err(e) => Err(format!("training failed: {e}")),
            };
            let (mean, std, status) = match result {
                Ok(r) => (Some(r.accuracy_mean), Some(r.accuracy_std), "ok".to_string()),
                Err(e) => {
                    log::warn!("cell {}: {e}", cell.id);
                    (None, None, format!("error: {e}"))
                }
            };
            GridRow {
                cell_id: cell.id.clone(),
                n1: cfg.plan.train.n_way,
                k1: cfg.plan.train.k_shot,
                n2: cfg.plan.infer.n_way,
                k2: cfg.plan.infer.k_shot,
                q_per_class: cfg.plan.infer.q_per_class,
                model_variant: cell.variant.name().to_string(),
                iterations: cfg.iterations,
                seed: cfg.seed,
                accuracy_mean: mean,
                accuracy_std: std,
                wall_seconds: train_secs + t.elapsed().as_secs_f64(),
                status,
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_grid_csv(rows: &[GridRow], path: &Path) -> Result<(), TrainingError> {
    let csv_err = |source| TrainingError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record([
            "cell_id",
            "N1",
            "K1",
            "N2",
            "K2",
            "q_per_class",
            "model_variant",
            "iterations",
            "seed",
            "accuracy_mean",
            "accuracy_std",
            "wall_seconds",
            "status",
        ])
        .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<GridRow>, TrainingError> {
    let csv_err = |source| TrainingError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Markdown table with accuracies in percent as `mean ± std`.
pub fn render_grid_markdown(rows: &[GridRow]) -> String {
    let mut s =
        String::from("| cell | N1 | K1 | N2 | K2 | variant | accuracy (%) |\n|---|---:|---:|---:|---:|---|---|\n");
    for r in rows {
        let acc = match (r.accuracy_mean, r.accuracy_std) {
            (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
            _ => r.status.clone(),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.cell_id, r.n1, r.k1, r.n2, r.k2, r.model_variant, acc
        );
    }
    s.push_str("\n± is the standard deviation of accuracy across evaluation episodes.\n");
    s
}

pub fn write_grid_markdown(rows: &[GridRow], path: &Path) -> Result<(), TrainingError> {
    std::fs::write(path, render_grid_markdown(rows)).map_err(|source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    })
}
