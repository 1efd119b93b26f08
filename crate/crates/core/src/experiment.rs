//! Seed sweeps and ablations on top of [`Federation`].
//!
//! Output layout for a run under `output_dir`:
//!
//! ```text
//! <config-hash>/summary.json
//! <config-hash>/<seed>/config.resolved
//! <config-hash>/<seed>/dataset.csv
//! <config-hash>/<seed>/metrics.csv
//! <config-hash>/<seed>/metrics.jsonl
//! <config-hash>/<seed>/checkpoint-<round>.json
//! <config-hash>/<seed>/global.json
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{dirichlet_partition, make_synthetic, DataError, Dataset};
use crate::exec::{map_ordered, ExecMode};
use crate::metrics::{rounds_to_target, write_json_line, MetricsCsv, MetricsError, RoundMetrics};
use crate::model::{ModelError, ModelSnapshot};
use crate::protocol::{Federation, ProtocolError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("seed {seed} failed: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("invalid experiment input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub exec: ExecMode,
    /// Print one progress line per round to stderr.
    pub verbose: bool,
}

/// Generated data plus a fresh federation for one seed.
pub fn build_federation(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Federation)> {
    let d = &cfg.data;
    let data = make_synthetic(
        d.num_classes,
        d.per_class,
        d.dim,
        d.separation,
        cfg.data_seed(seed),
    )?;
    let shards = dirichlet_partition(&data, &cfg.partition_spec(seed))?;
    let fed = Federation::new(shards, &cfg.model_config(), seed)?;
    Ok((data, fed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_accuracy: f64,
    /// Global test accuracy after each round.
    pub trajectory: Vec<f64>,
    pub rounds_to_target: Option<usize>,
}

/// Runs every round for one seed, writing artifacts under `dir` if given.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: Option<&Path>,
    opts: RunOptions,
) -> Result<(SeedResult, Federation)> {
    let (data, fed) = build_federation(cfg, seed)?;
    let mut fed = fed.with_exec(opts.exec);
    let protocol = cfg.protocol_config();
    let strategy = cfg.fedct.strategy.to_string();

    let mut sinks = match dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let resolved = dir.join("config.resolved");
            fs::write(&resolved, cfg.to_toml()).map_err(io_err(&resolved))?;
            let ds = dir.join("dataset.csv");
            data.write_csv(BufWriter::new(File::create(&ds).map_err(io_err(&ds))?))?;
            let csv_path = dir.join("metrics.csv");
            let csv = MetricsCsv::new(
                BufWriter::new(File::create(&csv_path).map_err(io_err(&csv_path))?),
                &strategy,
                seed,
            )?;
            let jsonl_path = dir.join("metrics.jsonl");
            let jsonl = BufWriter::new(File::create(&jsonl_path).map_err(io_err(&jsonl_path))?);
            Some((dir, csv, jsonl))
        }
        None => None,
    };

    let mut trajectory = Vec::with_capacity(cfg.train.rounds);
    for _ in 0..cfg.train.rounds {
        let m: RoundMetrics = fed.run_round(&protocol)?;
        if opts.verbose {
            eprintln!(
                "seed {seed} round {:>3} acc {:.4} plan [{}] {:.0} ms",
                m.round,
                m.global_test_accuracy,
                m.broadcast_plans.join(" | "),
                m.wall_time_ms
            );
        }
        trajectory.push(m.global_test_accuracy);
        if let Some((dir, csv, jsonl)) = sinks.as_mut() {
            csv.write(&m)?;
            write_json_line(jsonl, &m)?;
            let k = cfg.run.checkpoint_every;
            if k > 0 && m.round.is_multiple_of(k) {
                let path = dir.join(format!("checkpoint-{:04}.json", m.round));
                fed.checkpoint().save(&path)?;
            }
        }
    }
    if let Some((dir, mut csv, mut jsonl)) = sinks {
        csv.flush()?;
        let path = dir.join("metrics.jsonl");
        jsonl.flush().map_err(io_err(&path))?;
        ModelSnapshot::new(fed.global.model.clone(), usize::MAX, fed.global.round)
            .save(&dir.join("global.json"))?;
    }

    let final_accuracy = *trajectory.last().expect("rounds >= 1");
    let reached = cfg
        .run
        .target_accuracy
        .and_then(|t| rounds_to_target(&trajectory, t));
    Ok((
        SeedResult {
            seed,
            final_accuracy,
            trajectory,
            rounds_to_target: reached,
        },
        fed,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub strategy: String,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub final_accuracy_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub final_accuracy_std: f64,
    pub target_accuracy: Option<f64>,
    /// Mean over seeds with unreached targets counted as `rounds + 1`.
    pub mean_rounds_to_target: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean rounds-to-target over seeds, counting unreached seeds as `rounds + 1`.
pub fn censored_mean_rounds(results: &[SeedResult], rounds: usize, target: f64) -> f64 {
    let total: usize = results
        .iter()
        .map(|r| rounds_to_target(&r.trajectory, target).unwrap_or(rounds + 1))
        .sum();
    total as f64 / results.len() as f64
}

impl RunSummary {
    pub fn from_results(cfg: &ExperimentConfig, per_seed: Vec<SeedResult>) -> Self {
        let finals: Vec<f64> = per_seed.iter().map(|r| r.final_accuracy).collect();
        let (mean, std) = mean_std(&finals);
        RunSummary {
            config_hash: cfg.hash(),
            strategy: cfg.fedct.strategy.to_string(),
            rounds: cfg.train.rounds,
            seeds: per_seed.iter().map(|r| r.seed).collect(),
            final_accuracy_mean: mean,
            final_accuracy_std: std,
            target_accuracy: cfg.run.target_accuracy,
            mean_rounds_to_target: cfg
                .run
                .target_accuracy
                .map(|t| censored_mean_rounds(&per_seed, cfg.train.rounds, t)),
            per_seed,
        }
    }
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run.output_dir.join(cfg.hash())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Input(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// One full run per seed, then `summary.json`. A failing seed aborts the
/// sweep; finished seeds keep their files and are listed in `summary.partial.json`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    opts: RunOptions,
) -> Result<RunSummary> {
    if seeds.is_empty() {
        return Err(ExperimentError::Input(
            "at least one seed is required".into(),
        ));
    }
    cfg.validate()?;
    let root = run_dir(cfg);
    fs::create_dir_all(&root).map_err(io_err(&root))?;

    let outcomes = map_ordered(opts.exec, seeds, |&seed| {
        let dir = root.join(seed.to_string());
        run_seed(cfg, seed, Some(&dir), opts).map(|(r, _)| r)
    });
    let mut done = Vec::new();
    let mut failure = None;
    for (&seed, outcome) in seeds.iter().zip(outcomes) {
        match outcome {
            Ok(r) => done.push(r),
            Err(e) if failure.is_none() => {
                failure = Some(ExperimentError::Seed {
                    seed,
                    source: Box::new(e),
                })
            }
            Err(_) => {}
        }
    }
    if let Some(err) = failure {
        if !done.is_empty() {
            write_json(
                &root.join("summary.partial.json"),
                &RunSummary::from_results(cfg, done),
            )?;
        }
        return Err(err);
    }
    let summary = RunSummary::from_results(cfg, done);
    write_json(&root.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Strategy,
    LambdaFuse,
    ExchangeIterations,
    /// Switches the loss terms and the exchange on and off.
    Modules,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Strategy => "strategy",
            AblationAxis::LambdaFuse => "lambda_fuse",
            AblationAxis::ExchangeIterations => "exchange_iterations",
            AblationAxis::Modules => "modules",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "strategy" => Ok(AblationAxis::Strategy),
            "lambda_fuse" => Ok(AblationAxis::LambdaFuse),
            "exchange_iterations" | "N_e" => Ok(AblationAxis::ExchangeIterations),
            "modules" => Ok(AblationAxis::Modules),
            other => Err(format!(
                "unknown axis `{other}` (expected strategy, lambda_fuse, exchange_iterations or modules)"
            )),
        }
    }
}

/// Values of the `modules` axis, from plain FedAvg to the full method.
pub const MODULE_PRESETS: [&str; 5] = [
    "base",
    "+exchange",
    "+exchange+mixup",
    "+exchange+contrastive",
    "full",
];

/// The configuration for one value of an ablation axis.
pub fn ablation_variant(
    base: &ExperimentConfig,
    axis: AblationAxis,
    value: &str,
) -> Result<ExperimentConfig> {
    let overrides: Vec<String> = match axis {
        AblationAxis::Strategy => vec![format!("fedct.strategy={value}")],
        AblationAxis::LambdaFuse => vec![format!("fedct.lambda_fuse={value}")],
        AblationAxis::ExchangeIterations => vec![format!("fedct.exchange_iterations={value}")],
        AblationAxis::Modules => {
            let (kappa, eta) = (base.fedct.kappa, base.fedct.eta);
            let (strategy, kappa, eta) = match value {
                "base" => ("none", 0.0, 0.0),
                "+exchange" => ("consistency", 0.0, 0.0),
                "+exchange+mixup" => ("consistency", 0.0, eta),
                "+exchange+contrastive" => ("consistency", kappa, 0.0),
                "full" => ("consistency", kappa, eta),
                other => {
                    return Err(ExperimentError::Input(format!(
                        "unknown module preset `{other}` (expected one of {})",
                        MODULE_PRESETS.join(", ")
                    )))
                }
            };
            vec![
                format!("fedct.strategy={strategy}"),
                format!("fedct.kappa={kappa:?}"),
                format!("fedct.eta={eta:?}"),
            ]
        }
    };
    let mut cfg = base.clone();
    for o in &overrides {
        cfg = cfg.with_override(o)?;
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub config_hash: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_rounds_to_target: Option<f64>,
}

/// One [`run_experiment`] per value; writes `ablation-<axis>.csv` and `.txt`
/// under the base output directory.
pub fn run_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
    values: &[String],
    seeds: &[u64],
    opts: RunOptions,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(ExperimentError::Input(
            "ablation needs at least one value".into(),
        ));
    }
    let variants = values
        .iter()
        .map(|v| ablation_variant(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&variants) {
        let s = run_experiment(cfg, seeds, opts)?;
        rows.push(AblationRow {
            value: value.clone(),
            config_hash: s.config_hash,
            mean_accuracy: s.final_accuracy_mean,
            std_accuracy: s.final_accuracy_std,
            mean_rounds_to_target: s.mean_rounds_to_target,
        });
    }

    let dir = &base.run.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join(format!("ablation-{axis}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(MetricsError::from)?;
    w.write_record([
        axis.to_string().as_str(),
        "mean_acc",
        "std_acc",
        "mean_rounds_to_target",
        "config_hash",
    ])
    .map_err(MetricsError::from)?;
    for r in &rows {
        w.write_record([
            r.value.clone(),
            r.mean_accuracy.to_string(),
            r.std_accuracy.to_string(),
            r.mean_rounds_to_target
                .map(|v| v.to_string())
                .unwrap_or_default(),
            r.config_hash.clone(),
        ])
        .map_err(MetricsError::from)?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    let txt_path = dir.join(format!("ablation-{axis}.txt"));
    fs::write(&txt_path, ablation_table(axis, &rows)).map_err(io_err(&txt_path))?;
    Ok(rows)
}

/// Aligned plain-text table of ablation rows.
pub fn ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let head = axis.to_string();
    let width = rows
        .iter()
        .map(|r| r.value.len())
        .chain([head.len()])
        .max()
        .unwrap_or(0);
    let mut out = format!(
        "{head:<width$}  {:>17}  {:>15}\n",
        "accuracy (%)", "rounds-to-target"
    );
    for r in rows {
        let acc = format!(
            "{:.2} ± {:.2}",
            100.0 * r.mean_accuracy,
            100.0 * r.std_accuracy
        );
        let rtt = r
            .mean_rounds_to_target
            .map(|v| format!("{v:.1}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!("{:<width$}  {acc:>17}  {rtt:>15}\n", r.value));
    }
    out
}
