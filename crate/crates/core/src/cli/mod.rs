//! The `protoep` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 failed check (gradcheck or trend).

mod config;
mod gradcheck;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::{
    load_config, parse_config, prepare, raw_data, CustomCell, DataSource, GridConfig, GridPreset, Prepared,
    ReportFormat, RunConfig,
};
pub use gradcheck::{run_gradcheck, GradcheckConfig, LossCheck};

use crate::data::{write_embeddings, write_fewrel};
use crate::episodes::EpisodeError;
use crate::model::{Checkpoint, ModelError};
use crate::training::{
    evaluate, read_grid_csv, render_grid_markdown, run_grid, train, trend_check, write_grid_csv, write_trace_csv,
    Direction, EvalReport, TrainingError, TrendAxis,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Runtime(_) => 1,
            Self::Config(_) => 2,
            Self::Check(_) => 3,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { .. } | ModelError::FingerprintMismatch { .. } => Self::Config(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Model(m) => m.into(),
            TrainingError::Config { .. }
            | TrainingError::Spec(_)
            | TrainingError::Episode(EpisodeError::Config { .. }) => Self::Config(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "protoep",
    version,
    about = "Few-shot relation classification with prototype networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for grids and evaluation.
    #[arg(long, global = true, env = "PROTOEP_JOBS")]
    pub jobs: Option<usize>,
    /// Output directory, overriding `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated report formats (csv, markdown, json).
    #[arg(long, global = true, value_delimiter = ',')]
    pub format: Option<Vec<ReportFormat>>,
    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes a checkpoint, a loss trace, and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on inference episodes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every cell of an experiment grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a directional accuracy trend in a grid CSV.
    Trend {
        #[arg(long)]
        table: PathBuf,
        /// n1, k1, n2, k2, n_tied, or k_tied.
        #[arg(long)]
        axis: TrendAxis,
        /// increasing, decreasing, or non_increasing.
        #[arg(long)]
        direction: Direction,
    },
    /// Finite-difference check of every loss on a toy episode.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump a synthetic dataset as FewRel JSON plus a word-vector file.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Runs the parsed command line and returns the text for stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.jobs {
        Some(0) => Err(CliError::Config("`jobs` must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(|| dispatch(&cli)),
        None => dispatch(&cli),
    }
}

fn dispatch(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Train { config } => cmd_train(&resolve(cli, config)?),
        Command::Eval { config, checkpoint } => cmd_eval(&resolve(cli, config)?, checkpoint),
        Command::Grid { config } => cmd_grid(&resolve(cli, config)?),
        Command::Trend { table, axis, direction } => cmd_trend(table, *axis, *direction, cli.out.as_deref()),
        Command::Gradcheck { config } => {
            let mut cfg: GradcheckConfig = match config {
                Some(p) => load_config(p)?,
                None => GradcheckConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cmd_gradcheck(&cfg)
        }
        Command::Synth { config } => cmd_synth(&resolve(cli, config)?),
    }
}

/// Loads a run config and applies command-line overrides.
fn resolve(cli: &Cli, path: &Path) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = load_config(path)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(f) = &cli.format {
        cfg.formats = f.clone();
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.grid.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Runtime(format!("{}: {e}", cfg.out.display())))?;
    write(&cfg.out.join("config.resolved.json"), cfg.echo())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let data = prepare(cfg)?;
    prepare_out(cfg)?;
    let out = train(&data.train, &data.vocab, &data.table, &cfg.train)?;
    let ck = Checkpoint::new(&out.params, &data.arch)?;
    let ck_path = cfg.out.join("checkpoint.json");
    ck.save(&ck_path)?;
    let trace_path = cfg.out.join("loss_trace.csv");
    write_trace_csv(&out.trace, &trace_path)?;
    let last = out.trace.last().map_or(f64::NAN, |r| r.total);
    Ok(format!(
        "trained {} iterations (final loss {last:.6}); checkpoint {} fingerprint {}\nloss trace {}\n",
        out.trace.len(),
        ck_path.display(),
        ck.fingerprint,
        trace_path.display()
    ))
}

fn eval_markdown(r: &EvalReport) -> String {
    format!(
        "| N | K | q_per_class | episodes | accuracy (%) |\n|---:|---:|---:|---:|---|\n| {} | {} | {} | {} | {:.2} ± {:.2} |\n\n± is the standard deviation of accuracy across evaluation episodes.\n",
        r.config.n_way,
        r.config.k_shot,
        r.config.q_per_class,
        r.episodes,
        100.0 * r.accuracy_mean,
        100.0 * r.accuracy_std
    )
}

fn eval_csv(r: &EvalReport) -> String {
    format!(
        "n_way,k_shot,q_per_class,episodes,seed,accuracy_mean,accuracy_std\n{},{},{},{},{},{},{}\n",
        r.config.n_way, r.config.k_shot, r.config.q_per_class, r.episodes, r.seed, r.accuracy_mean, r.accuracy_std
    )
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<String, CliError> {
    let data = prepare(cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.params(&data.arch)?;
    prepare_out(cfg)?;
    let t = &cfg.train;
    let report = evaluate(
        &data.eval,
        &params,
        &t.encoder,
        &t.plan.infer,
        t.eval_iterations,
        t.eval_seed(),
        t.use_cross_attention,
    )?;
    for f in &cfg.formats {
        let (name, body) = match f {
            ReportFormat::Json => (
                "eval_report.json",
                serde_json::to_string_pretty(&report).expect("serializes"),
            ),
            ReportFormat::Csv => ("eval_report.csv", eval_csv(&report)),
            ReportFormat::Markdown => ("eval_report.md", eval_markdown(&report)),
        };
        write(&cfg.out.join(name), body)?;
    }
    Ok(format!(
        "{}-way {}-shot accuracy {:.4} ± {:.4} over {} episodes\n",
        report.config.n_way, report.config.k_shot, report.accuracy_mean, report.accuracy_std, report.episodes
    ))
}

pub fn cmd_grid(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg.grid.spec(&cfg.train);
    let data = prepare(cfg)?;
    prepare_out(cfg)?;
    let rows = run_grid(&data.train, &data.eval, &data.vocab, &data.table, &spec)?;
    for f in &cfg.formats {
        match f {
            ReportFormat::Csv => write_grid_csv(&rows, &cfg.out.join("grid.csv"))?,
            ReportFormat::Markdown => write(&cfg.out.join("grid.md"), render_grid_markdown(&rows))?,
            ReportFormat::Json => write(
                &cfg.out.join("grid.json"),
                serde_json::to_string_pretty(&rows).expect("serializes"),
            )?,
        }
    }
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed; see the status column", rows.len());
    }
    Ok(format!(
        "{} cells ({failed} failed); tables in {}\n{}",
        rows.len(),
        cfg.out.display(),
        render_grid_markdown(&rows)
    ))
}

pub fn cmd_trend(table: &Path, axis: TrendAxis, direction: Direction, out: Option<&Path>) -> Result<String, CliError> {
    let rows = read_grid_csv(table)?;
    let report = trend_check(&rows, axis, direction)?;
    let text = report.render();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        write(
            &dir.join("trend.json"),
            serde_json::to_string_pretty(&report).expect("serializes"),
        )?;
    }
    if report.passed {
        Ok(text)
    } else {
        Err(CliError::Check(text))
    }
}

pub fn cmd_gradcheck(cfg: &GradcheckConfig) -> Result<String, CliError> {
    let checks = run_gradcheck(cfg)?;
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!(
            "{:<9} max relative error {:.3e} over {} coordinates ({})\n",
            c.loss,
            c.report.max_relative_error,
            c.report.coordinates,
            if c.passed(cfg.tolerance) { "ok" } else { "FAIL" }
        ));
    }
    if checks.iter().all(|c| c.passed(cfg.tolerance)) {
        Ok(text)
    } else {
        Err(CliError::Check(format!(
            "tolerance {:e} exceeded\n{text}",
            cfg.tolerance
        )))
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String, CliError> {
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        return Err(CliError::Config("`data.kind`: synth requires kind = synthetic".into()));
    }
    let (train_ds, eval_ds, table) = raw_data(&cfg.data)?;
    prepare_out(cfg)?;
    let runtime = |e: crate::data::DataError| CliError::Runtime(e.to_string());
    let train_path = cfg.out.join("train.json");
    write_fewrel(&train_ds, &train_path).map_err(runtime)?;
    let eval_path = match &eval_ds {
        Some(e) => {
            let p = cfg.out.join("eval.json");
            write_fewrel(e, &p).map_err(runtime)?;
            Some(p)
        }
        None => None,
    };
    let emb_path = cfg.out.join("embeddings.txt");
    write_embeddings(&table, &emb_path).map_err(runtime)?;
    let follow_up = RunConfig {
        data: DataSource::Fewrel {
            train_path: Some(train_path.clone()),
            eval_path,
            embeddings_path: Some(emb_path.clone()),
            embedding_dim: table.dim(),
        },
        ..cfg.clone()
    };
    let cfg_path = cfg.out.join("fewrel_config.json");
    write(&cfg_path, follow_up.echo())?;
    Ok(format!(
        "wrote {} relations / {} samples to {}, embeddings to {}, config {}\n",
        train_ds.num_relations() + eval_ds.as_ref().map_or(0, |e| e.num_relations()),
        train_ds.num_samples() + eval_ds.as_ref().map_or(0, |e| e.num_samples()),
        train_path.display(),
        emb_path.display(),
        cfg_path.display()
    ))
}
