//! Episodic SGD training and evaluation.

mod grid;
mod trend;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, EmbeddingTable, IndexedDataset, Vocab};
use crate::episodes::{episode_at, episode_stream, EpisodeConfig, EpisodeError, InconsistentPlan};
use crate::model::{
    episode_loss, predict_log_probs, EncoderConfig, LossBreakdown, LossWeights, ModelError, ModelParams,
};
use crate::numerics::{NumArray, Tape};

pub use grid::{
    read_grid_csv, render_grid_markdown, run_grid, write_grid_csv, write_grid_markdown, GridAxis, GridCell, GridRow,
    GridSpec,
};
pub use trend::{trend_check, Direction, TrendAxis, TrendGroup, TrendReport};

// Parameter initialization draws from its own generator so that changing the
// model never shifts the episode stream.
const INIT_SALT: u64 = 0xA076_1D64_78BD_642F;
const EVAL_SALT: u64 = 0xE703_7ED1_A0B4_28DB;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(
        "non-finite loss at iteration {iteration}: ce={} dist={} cl={} total={}",
        breakdown.ce, breakdown.dist, breakdown.cl, breakdown.total
    )]
    NonFinite { iteration: usize, breakdown: LossBreakdown },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub plan: InconsistentPlan,
    pub iterations: usize,
    pub eval_iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub use_cross_attention: bool,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            plan: InconsistentPlan::default(),
            iterations: 2000,
            eval_iterations: 500,
            learning_rate: 0.1,
            weight_decay: 1e-5,
            grad_clip: Some(10.0),
            seed: 1,
            weights: LossWeights::default(),
            use_cross_attention: true,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let fail = |field, reason: String| Err(TrainingError::Config { field, reason });
        self.plan.train.validate()?;
        self.plan.infer.validate()?;
        if self.iterations == 0 {
            return fail("iterations", "must be at least 1".into());
        }
        if self.eval_iterations == 0 {
            return fail("eval_iterations", "must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(
                "learning_rate",
                format!("{} is not a nonnegative number", self.learning_rate),
            );
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(
                "weight_decay",
                format!("{} is not a nonnegative number", self.weight_decay),
            );
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return fail("grad_clip", format!("{c} is not a positive number"));
            }
        }
        self.weights.validate()?;
        self.encoder.validate()?;
        Ok(())
    }

    /// Seed of the evaluation episode stream, distinct from the training stream.
    pub fn eval_seed(&self) -> u64 {
        self.seed ^ EVAL_SALT
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub ce: f64,
    pub dist: f64,
    pub cl: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

/// Initial parameters for `cfg`, drawn from a generator keyed by `cfg.seed`.
pub fn init_params(cfg: &TrainConfig, vocab: &Vocab, table: &EmbeddingTable) -> Result<ModelParams, TrainingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    Ok(ModelParams::init(&cfg.encoder, vocab, table, &mut rng)?)
}

/// Trains from [`init_params`].
pub fn train(
    dataset: &IndexedDataset,
    vocab: &Vocab,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainingError> {
    let params = init_params(cfg, vocab, table)?;
    train_from(dataset, params, cfg)
}

/// SGD over `cfg.iterations` episodes of `episode_stream(cfg.seed)`:
/// `p ← p − lr·(clip(g) + wd·p)`.
pub fn train_from(
    dataset: &IndexedDataset,
    mut params: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainingError> {
    cfg.validate()?;
    params.check_shapes()?;
    let stream = episode_stream(dataset, &cfg.plan.train, cfg.seed, cfg.iterations)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for (iteration, episode) in stream.enumerate() {
        let mut tape = Tape::new();
        let vars = params.to_tape(&mut tape);
        let loss = episode_loss(
            &mut tape,
            &episode,
            &vars,
            &cfg.encoder,
            &cfg.weights,
            cfg.use_cross_attention,
        )?;
        let b = loss.breakdown(&tape);
        if ![b.ce, b.dist, b.cl, b.total].iter().all(|v| v.is_finite()) {
            return Err(TrainingError::NonFinite {
                iteration,
                breakdown: b,
            });
        }
        if loss.dist.is_some_and(|d| d.degenerate) || loss.cl.is_some_and(|c| c.degenerate) {
            log::debug!("iteration {iteration}: ratio loss denominator collapsed");
        }
        let grads = tape.backward(loss.total).map_err(ModelError::from)?;
        let grads: Vec<NumArray> = vars
            .to_vec()
            .into_iter()
            .zip(params.arrays())
            .map(|(v, a)| grads.wrt(v, a))
            .collect();
        sgd_step(&mut params, &grads, cfg);
        trace.push(TraceRow {
            iteration,
            ce: b.ce,
            dist: b.dist,
            cl: b.cl,
            total: b.total,
        });
    }
    Ok(TrainOutput { params, trace })
}

/// One update `p ← p − lr·(clip(g) + wd·p)` with global-norm clipping.
/// A zero learning rate leaves every value bit-identical.
pub fn sgd_step(params: &mut ModelParams, grads: &[NumArray], cfg: &TrainConfig) {
    if cfg.learning_rate == 0.0 {
        return;
    }
    let norm = grads.iter().map(NumArray::sq_norm).sum::<f64>().sqrt();
    let factor = match cfg.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let (lr, wd) = (cfg.learning_rate, cfg.weight_decay);
    for (p, g) in params.arrays_mut().into_iter().zip(grads) {
        for (x, &gx) in p.values_mut().iter_mut().zip(g.values()) {
            *x -= lr * (factor * gx + wd * *x);
        }
    }
}

/// Mean and spread of per-episode query accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_mean: f64,
    /// Population standard deviation across episode accuracies.
    pub accuracy_std: f64,
    pub episodes: usize,
    pub config: EpisodeConfig,
    pub seed: u64,
    pub use_cross_attention: bool,
}

/// Fraction of rows whose argmax (first on ties) equals the label.
pub fn accuracy(log_probs: &NumArray, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = log_probs.row(*i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Accuracy over `episodes` episodes of `config` drawn from `seed`.
///
/// Episodes are scored in parallel against a read-only parameter snapshot;
/// the result does not depend on the number of threads.
pub fn evaluate(
    dataset: &IndexedDataset,
    params: &ModelParams,
    encoder: &EncoderConfig,
    config: &EpisodeConfig,
    episodes: usize,
    seed: u64,
    use_cross_attention: bool,
) -> Result<EvalReport, TrainingError> {
    if episodes == 0 {
        return Err(TrainingError::Config {
            field: "eval_iterations",
            reason: "must be at least 1".into(),
        });
    }
    config.check_capacity(dataset)?;
    let accs: Vec<f64> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| -> Result<f64, TrainingError> {
            let episode = episode_at(dataset, config, seed, i)?;
            let mut tape = Tape::new();
            let vars = params.to_tape_frozen(&mut tape);
            let lp = predict_log_probs(&mut tape, &episode, &vars, encoder, use_cross_attention)?;
            Ok(accuracy(&lp, &episode.query_labels()))
        })
        .collect::<Result<_, _>>()?;
    let (mean, std) = mean_std(&accs);
    Ok(EvalReport {
        accuracy_mean: mean,
        accuracy_std: std,
        episodes,
        config: *config,
        seed,
        use_cross_attention,
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<(), TrainingError> {
    let csv_err = |source| TrainingError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in trace {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>, TrainingError> {
    let csv_err = |source| TrainingError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_single_episode_has_zero_spread() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!((m, s), (0.5, 0.5));
    }

    #[test]
    fn accuracy_takes_first_maximum() {
        let lp = NumArray::from_rows(&[vec![0.0, 0.0], vec![-1.0, -0.5], vec![-0.1, -3.0]]).unwrap();
        assert_eq!(accuracy(&lp, &[0, 1, 1]), 2.0 / 3.0);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("iterations"));
        let bad = TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("grad_clip"));
        assert!(TrainConfig::default().validate().is_ok());
    }
}
