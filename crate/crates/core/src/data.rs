//! Synthetic Gaussian-mixture data and label-skewed client partitioning.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::seed::{rng_for, SimRng, Stream};
use crate::tensor::Tensor;

/// Redraw budget for a partition that leaves some client too small.
pub const PARTITION_RETRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("partition failed after {attempts} attempts: {constraint}")]
    Partition { attempts: usize, constraint: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if features.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Row indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Concatenates datasets with matching width and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Invalid("nothing to concatenate".into()))?;
        let (dim, k) = (first.dim(), first.num_classes);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != dim || p.num_classes != k {
                return Err(DataError::Invalid(
                    "concatenating incompatible datasets".into(),
                ));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        let features =
            Tensor::new(labels.len(), dim, data).map_err(|e| DataError::Invalid(e.to_string()))?;
        Dataset::new(features, labels, k)
    }

    /// Writes `f0,..,f{d-1},label` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (i, &label) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads the format produced by [`Dataset::write_csv`].
    pub fn read_csv<R: Read>(input: R, num_classes: usize) -> Result<Dataset, DataError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let dim = headers
            .len()
            .checked_sub(1)
            .ok_or_else(|| DataError::Invalid("csv header must end with a label column".into()))?;
        if headers.get(dim) != Some("label") {
            return Err(DataError::Invalid("last csv column must be `label`".into()));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter().take(dim) {
                data.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| DataError::Invalid(format!("feature `{field}`: {e}")))?,
                );
            }
            let label = &rec[dim];
            labels.push(
                label
                    .parse::<usize>()
                    .map_err(|e| DataError::Invalid(format!("label `{label}`: {e}")))?,
            );
        }
        let features =
            Tensor::new(labels.len(), dim, data).map_err(|e| DataError::Invalid(e.to_string()))?;
        Dataset::new(features, labels, num_classes)
    }
}

/// Isotropic Gaussian classes around random directions scaled by `separation`.
///
/// Rows are laid out class-major: `per_class` rows of class 0, then class 1, ...
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes < 2
        || per_class < 2
        || dim == 0
        || separation.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
    {
        return Err(DataError::Invalid(format!(
            "need K >= 2, per_class >= 2, dim >= 1, separation > 0 (got {num_classes}, {per_class}, {dim}, {separation})"
        )));
    }
    let mut rng = rng_for(Stream::Data, &[seed]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            dir.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();

    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(m + noise);
            }
            labels.push(k);
        }
    }
    let features = Tensor::new(n, dim, data).expect("sized above");
    Dataset::new(features, labels, num_classes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub beta: f64,
    pub seed: u64,
    pub min_samples_per_client: usize,
}

/// One client's slice of the data.
#[derive(Clone, Debug)]
pub struct Shard {
    pub owner: usize,
    /// Rows of the source dataset owned by this client, ascending.
    pub indices: Vec<usize>,
    /// Source rows in `train`, in order.
    pub train_indices: Vec<usize>,
    /// Source rows in `test`, in order.
    pub test_indices: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
    /// Per-class counts over the whole shard (train + test).
    pub class_histogram: Vec<usize>,
}

impl Shard {
    /// Builds a shard from source rows, splitting each class 80/20.
    pub fn from_indices(
        owner: usize,
        data: &Dataset,
        mut indices: Vec<usize>,
        rng: &mut SimRng,
    ) -> Shard {
        indices.sort_unstable();
        let mut by_class = vec![Vec::new(); data.num_classes];
        for &i in &indices {
            by_class[data.labels[i]].push(i);
        }
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for rows in &mut by_class {
            rows.shuffle(rng);
            let n_test = rows.len() / 5;
            test_idx.extend_from_slice(&rows[..n_test]);
            train_idx.extend_from_slice(&rows[n_test..]);
        }
        // Tiny shards can round every class down to zero test rows.
        if test_idx.is_empty() && train_idx.len() >= 2 {
            test_idx.push(train_idx.pop().expect("len >= 2"));
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let class_histogram = by_class.iter().map(Vec::len).collect();
        Shard {
            owner,
            train: data.subset(&train_idx),
            test: data.subset(&test_idx),
            train_indices: train_idx,
            test_indices: test_idx,
            indices,
            class_histogram,
        }
    }

    pub fn train_size(&self) -> usize {
        self.train.len()
    }
}

fn sample_dirichlet(rng: &mut SimRng, n: usize, beta: f64) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0 checked by caller");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Very small concentrations can underflow every draw to zero.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Splits `data` across clients with per-class Dirichlet(β) proportions.
pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Shard>, DataError> {
    let n = spec.num_clients;
    if n < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 clients, got {n}"
        )));
    }
    if !(spec.beta > 0.0 && spec.beta.is_finite()) {
        return Err(DataError::Invalid(format!(
            "beta must be > 0, got {}",
            spec.beta
        )));
    }
    if data.len() < spec.min_samples_per_client * n {
        return Err(DataError::Partition {
            attempts: 0,
            constraint: format!(
                "{} samples cannot give {n} clients {} each",
                data.len(),
                spec.min_samples_per_client
            ),
        });
    }

    let mut rng = rng_for(Stream::Partition, &[spec.seed]);
    let by_class = data.class_indices();
    let mut smallest = 0;
    for _ in 0..PARTITION_RETRIES {
        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); n];
        for rows in &by_class {
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            let props = sample_dirichlet(&mut rng, n, spec.beta);
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == n {
                    rows.len()
                } else {
                    ((cum * rows.len() as f64) as usize).clamp(start, rows.len())
                };
                owned[client].extend_from_slice(&rows[start..end]);
                start = end;
            }
        }
        smallest = owned.iter().map(Vec::len).min().unwrap_or(0);
        if smallest >= spec.min_samples_per_client {
            return Ok(owned
                .into_iter()
                .enumerate()
                .map(|(owner, idx)| Shard::from_indices(owner, data, idx, &mut rng))
                .collect());
        }
    }
    Err(DataError::Partition {
        attempts: PARTITION_RETRIES,
        constraint: format!(
            "every client needs >= {} samples (last draw's smallest client had {smallest})",
            spec.min_samples_per_client
        ),
    })
}

/// Union of all shard test splits, in client order.
pub fn pooled_test(shards: &[Shard]) -> Result<Dataset, DataError> {
    let parts: Vec<&Dataset> = shards.iter().map(|s| &s.test).collect();
    Dataset::concat(&parts)
}

/// Seeded shuffle of a shard's train rows, chunked into batches.
/// The last batch may be short.
pub fn batches(shard: &Shard, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..shard.train_size()).collect();
    let mut rng = rng_for(Stream::LocalTrain, &[epoch_seed]);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Uniformly chosen subset of `0..n` of the given size, ascending.
pub fn sample_without_replacement(rng: &mut impl Rng, n: usize, count: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, count.min(n)).into_vec();
    picked.sort_unstable();
    picked
}
