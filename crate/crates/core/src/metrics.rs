//! Evaluation: accuracy, per-class recall, linear CKA, and round records.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_without_replacement, Dataset};
use crate::model::Model;
use crate::seed::{rng_for, Stream};
use crate::tensor::{Tensor, TensorError};

/// Denominator floor below which CKA reports 0.
pub const CKA_DENOM_FLOOR: f64 = 1e-12;
/// Size of the shared probe set for global-view CKA.
pub const PROBE_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid metrics input: {0}")]
    Input(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Argmax per row; ties go to the lowest class index.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>, MetricsError> {
    let logits = model.logits(&data.features)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Top-1 accuracy.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::Input("accuracy on an empty dataset".into()));
    }
    let preds = predict(model, data)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Recall per class; `None` for classes with no samples in `data`.
pub fn per_class_recall(model: &Model, data: &Dataset) -> Result<Vec<Option<f64>>, MetricsError> {
    let preds = predict(model, data)?;
    let mut hits = vec![0usize; data.num_classes];
    let mut support = vec![0usize; data.num_classes];
    for (&p, &y) in preds.iter().zip(&data.labels) {
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&support)
        .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
        .collect())
}

fn center_columns(t: &Tensor) -> Tensor {
    let (n, d) = t.shape();
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(t.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out
}

fn frobenius_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Linear CKA between two feature matrices over the same rows:
/// `‖Bᵀ·A‖²_F / (‖Aᵀ·A‖_F · ‖Bᵀ·B‖_F)` after column centering.
pub fn linear_cka(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    if a.rows() != b.rows() {
        return Err(MetricsError::Input(format!(
            "CKA over {} and {} rows",
            a.rows(),
            b.rows()
        )));
    }
    if a.rows() < 2 {
        return Err(MetricsError::Input("CKA needs at least two rows".into()));
    }
    let (ac, bc) = (center_columns(a), center_columns(b));
    let (at, bt) = (ac.transpose(), bc.transpose());
    let cross = frobenius_sq(&bt.matmul(&ac)?);
    let self_a = frobenius_sq(&at.matmul(&ac)?).sqrt();
    let self_b = frobenius_sq(&bt.matmul(&bc)?).sqrt();
    if self_a < CKA_DENOM_FLOOR || self_b < CKA_DENOM_FLOOR {
        return Ok(0.0);
    }
    Ok(cross / (self_a * self_b))
}

/// First 1-based round whose accuracy reaches `target`.
pub fn rounds_to_target(trajectory: &[f64], target: f64) -> Option<usize> {
    trajectory.iter().position(|&a| a >= target).map(|i| i + 1)
}

/// Fixed seeded sample of a pooled set shared by all global-view comparisons.
pub fn probe_set(pooled: &Dataset, seed: u64) -> Dataset {
    let mut rng = rng_for(Stream::Probe, &[seed]);
    let idx = sample_without_replacement(&mut rng, pooled.len(), PROBE_SIZE);
    pooled.subset(&idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CkaMode {
    /// The same model before and after cross-training.
    LocalView,
    /// Different clients' models at the same point in training.
    GlobalView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaPair {
    pub a: String,
    pub b: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub mode: CkaMode,
    pub probe: String,
    pub pairs: Vec<CkaPair>,
}

impl CkaReport {
    pub fn mean(&self) -> Option<f64> {
        (!self.pairs.is_empty())
            .then(|| self.pairs.iter().map(|p| p.value).sum::<f64>() / self.pairs.len() as f64)
    }
}

/// Before/after comparison of one client's model across an exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeReport {
    pub local_view: CkaReport,
    pub global_view: CkaReport,
    pub recall_pre: Vec<Option<f64>>,
    pub recall_post: Vec<Option<f64>>,
    /// `post − pre` per class; `None` where the class is absent from the probe.
    pub recall_delta: Vec<Option<f64>>,
}

/// Builds local-view CKA (`pre` vs `post` features on `owner_test`),
/// global-view CKA (every pair of `encoders` on `probe`), and per-class
/// recall of `pre` and `post` on `probe`.
pub fn knowledge_preservation_report(
    pre: &Model,
    post: &Model,
    owner_test: &Dataset,
    encoders: &[(String, &Model)],
    probe: &Dataset,
) -> Result<KnowledgeReport, MetricsError> {
    if probe.is_empty() {
        return Err(MetricsError::Input("empty probe set".into()));
    }
    let local = linear_cka(
        &pre.encode(&owner_test.features)?,
        &post.encode(&owner_test.features)?,
    )?;
    let local_view = CkaReport {
        mode: CkaMode::LocalView,
        probe: "owner_test".into(),
        pairs: vec![CkaPair {
            a: "pre".into(),
            b: "post".into(),
            value: local,
        }],
    };

    let feats = encoders
        .iter()
        .map(|(name, m)| Ok((name.clone(), m.encode(&probe.features)?)))
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let mut pairs = Vec::new();
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            pairs.push(CkaPair {
                a: feats[i].0.clone(),
                b: feats[j].0.clone(),
                value: linear_cka(&feats[i].1, &feats[j].1)?,
            });
        }
    }
    let global_view = CkaReport {
        mode: CkaMode::GlobalView,
        probe: format!("probe[{}]", probe.len()),
        pairs,
    };

    let recall_pre = per_class_recall(pre, probe)?;
    let recall_post = per_class_recall(post, probe)?;
    let recall_delta = recall_pre
        .iter()
        .zip(&recall_post)
        .map(|(a, b)| Some(b.as_ref()? - a.as_ref()?))
        .collect();
    Ok(KnowledgeReport {
        local_view,
        global_view,
        recall_pre,
        recall_post,
        recall_delta,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean local-training loss.
    pub phase1: f64,
    /// Mean cross-training classification loss.
    pub cls: f64,
    pub apcl: f64,
    pub mix: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client: usize,
    /// Own local-training model on its own test split.
    pub pre_exchange: f64,
    /// Model held after cross-training (before aggregation) on its own test split.
    pub post_exchange: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_test_accuracy: f64,
    pub per_client_accuracy: Vec<ClientAccuracy>,
    pub loss_terms: LossTerms,
    /// One compact plan per exchange iteration, e.g. `0>2 1>0 2>1`.
    pub broadcast_plans: Vec<String>,
    pub apcl_skip_count: usize,
    /// Not serialized, so metric files stay byte-identical across runs.
    #[serde(skip, default)]
    pub wall_time_ms: f64,
}

impl RoundMetrics {
    pub fn mean_client_accuracy(&self) -> f64 {
        mean(self.per_client_accuracy.iter().map(|c| c.post_exchange))
    }

    pub fn mean_pre_exchange_accuracy(&self) -> f64 {
        mean(self.per_client_accuracy.iter().map(|c| c.pre_exchange))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fixed column order of `metrics.csv`.
pub const CSV_COLUMNS: [&str; 12] = [
    "round",
    "global_acc",
    "mean_client_acc",
    "l_cls",
    "l_apcl",
    "l_mix",
    "strategy",
    "seed",
    "l_phase1",
    "mean_pre_exchange_acc",
    "apcl_skips",
    "broadcast_plan",
];

/// Streams round records as CSV rows (wall time is omitted so files are reproducible).
pub struct MetricsCsv<W: Write> {
    writer: csv::Writer<W>,
    strategy: String,
    seed: u64,
}

impl<W: Write> MetricsCsv<W> {
    pub fn new(out: W, strategy: &str, seed: u64) -> Result<Self, MetricsError> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(CSV_COLUMNS)?;
        Ok(MetricsCsv {
            writer,
            strategy: strategy.to_string(),
            seed,
        })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<(), MetricsError> {
        self.writer.write_record([
            m.round.to_string(),
            m.global_test_accuracy.to_string(),
            m.mean_client_accuracy().to_string(),
            m.loss_terms.cls.to_string(),
            m.loss_terms.apcl.to_string(),
            m.loss_terms.mix.to_string(),
            self.strategy.clone(),
            self.seed.to_string(),
            m.loss_terms.phase1.to_string(),
            m.mean_pre_exchange_accuracy().to_string(),
            m.apcl_skip_count.to_string(),
            m.broadcast_plans.join("|"),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        self.writer.flush()?;
        Ok(())
    }
}

/// One JSON object per line.
pub fn write_json_line<W: Write, T: Serialize>(
    out: &mut W,
    record: &T,
) -> Result<(), MetricsError> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}
