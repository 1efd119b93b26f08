//! The cross-training round: local training, prototype upload and
//! consistency-aware model broadcasting, prototype-guided cross-training,
//! and weighted aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batches, pooled_test, sample_without_replacement, DataError, Dataset, Shard};
use crate::exec::{map_ordered, ExecMode};
use crate::losses::{
    fuse_prototypes, phase1_loss, phase3_loss, LossError, LossWeights, MfaPartner, Phase3Terms,
    PrototypeFlavor, PrototypeSet, PrototypeSource,
};
use crate::metrics::{accuracy, ClientAccuracy, LossTerms, MetricsError, RoundMetrics};
use crate::model::{
    sgd_step, BoundModel, ClassifierParams, Model, ModelConfig, ModelError, ModelSnapshot,
};
use crate::seed::{derive_seed, rng_for, Stream};
use crate::tensor::{Tape, Tensor, TensorError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const PHASE_LOCAL: u64 = 1;
const PHASE_CROSS: u64 = 3;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid protocol input: {0}")]
    Input(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("consistency matrix: client {client}: {reason}")]
    Matrix { client: usize, reason: String },
    #[error("training diverged on client {client} in {phase} at step {step}")]
    Divergence {
        client: usize,
        phase: &'static str,
        step: usize,
    },
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Send each model to the client whose prototypes it classifies best.
    Consistency,
    /// Send each model to the client whose prototypes it classifies worst.
    Inconsistency,
    /// Uniform random derangement.
    Random,
    /// No exchange; the round reduces to FedAvg.
    None,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Consistency => "consistency",
            Strategy::Inconsistency => "inconsistency",
            Strategy::Random => "random",
            Strategy::None => "none",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "consistency" => Ok(Strategy::Consistency),
            "inconsistency" => Ok(Strategy::Inconsistency),
            "random" => Ok(Strategy::Random),
            "none" => Ok(Strategy::None),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Per-round training knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub local_epochs: usize,
    pub cross_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub client_fraction: f64,
    pub strategy: Strategy,
    pub exchange_iterations: usize,
    pub weights: LossWeights,
    pub mfa_partner: MfaPartner,
    pub refresh_prototypes_per_exchange: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            local_epochs: 3,
            cross_epochs: 3,
            learning_rate: 0.01,
            weight_decay: 1e-5,
            batch_size: 32,
            client_fraction: 1.0,
            strategy: Strategy::Consistency,
            exchange_iterations: 1,
            weights: LossWeights::default(),
            mfa_partner: MfaPartner::Sample,
            refresh_prototypes_per_exchange: false,
        }
    }
}

/// SGD settings for one training call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Root of every batch-order and pairing seed in this call.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub mean_total: f64,
    pub mean_cls: f64,
    pub mean_apcl: f64,
    pub mean_mix: f64,
    pub apcl_skipped: usize,
}

/// Root seed of one client's local training in one round.
pub fn local_train_seed(master_seed: u64, round: usize, client: usize) -> u64 {
    derive_seed(&[master_seed, round as u64, client as u64, PHASE_LOCAL])
}

/// Batch-order seed of one epoch under a training root seed.
pub fn epoch_seed(train_seed: u64, epoch: usize) -> u64 {
    derive_seed(&[train_seed, epoch as u64])
}

/// Seed of the initial global model.
pub fn init_seed(master_seed: u64) -> u64 {
    derive_seed(&[master_seed])
}

fn cross_train_seed(master_seed: u64, round: usize, exchange: usize, client: usize) -> u64 {
    derive_seed(&[
        master_seed,
        round as u64,
        exchange as u64,
        client as u64,
        PHASE_CROSS,
    ])
}

/// Mini-batch SGD over `shard.train` with a caller-built objective.
fn sgd_epochs<F>(
    model: &mut Model,
    shard: &Shard,
    params: &TrainParams,
    phase: &'static str,
    objective: F,
) -> Result<TrainStats>
where
    F: Fn(&mut Tape, &BoundModel, &Tensor, &[usize], u64) -> Result<Phase3Terms>,
{
    let mut stats = TrainStats::default();
    let mut sums = [0.0f64; 4];
    for epoch in 0..params.epochs {
        let seed = epoch_seed(params.seed, epoch);
        for (b, rows) in batches(shard, params.batch_size, seed)
            .into_iter()
            .enumerate()
        {
            let x = shard.train.features.select_rows(&rows);
            let y: Vec<usize> = rows.iter().map(|&i| shard.train.labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let terms = objective(&mut tape, &bound, &x, &y, derive_seed(&[seed, b as u64]))?;
            let total = tape.value(terms.total).item();
            let diverged = ProtocolError::Divergence {
                client: shard.owner,
                phase,
                step: stats.steps,
            };
            if !total.is_finite() {
                return Err(diverged);
            }
            if tape.backward(terms.total).is_err() {
                return Err(diverged);
            }
            sgd_step(
                model,
                &bound,
                &tape,
                params.learning_rate,
                params.weight_decay,
            )?;
            stats.steps += 1;
            stats.apcl_skipped += terms.apcl_skipped;
            for (s, v) in sums
                .iter_mut()
                .zip([total, terms.cls, terms.apcl, terms.mix])
            {
                *s += v;
            }
        }
    }
    if stats.steps > 0 {
        let n = stats.steps as f64;
        stats.mean_total = sums[0] / n;
        stats.mean_cls = sums[1] / n;
        stats.mean_apcl = sums[2] / n;
        stats.mean_mix = sums[3] / n;
    }
    Ok(stats)
}

/// What a client receives from the server before cross-training.
#[derive(Clone, Debug)]
pub struct ReceivedBundle {
    pub snapshot: ModelSnapshot,
    pub local: PrototypeSet,
    pub global: PrototypeSet,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub shard: Shard,
    pub model: Model,
    pub last_local_prototypes: Option<PrototypeSet>,
    /// Set by the broadcast and consumed by cross-training.
    pub received: Option<ReceivedBundle>,
}

impl ClientState {
    pub fn new(shard: Shard, model: Model) -> Self {
        ClientState {
            id: shard.owner,
            shard,
            model,
            last_local_prototypes: None,
            received: None,
        }
    }
}

/// Trains the client's model on its own shard with plain cross entropy.
pub fn run_phase1_local_training(
    client: &mut ClientState,
    params: &TrainParams,
) -> Result<TrainStats> {
    sgd_epochs(
        &mut client.model,
        &client.shard,
        params,
        "local training",
        |tape, bound, x, y, _| {
            let xv = tape.constant(x.clone());
            let f = bound.encode(tape, xv)?;
            let logits = bound.classify(tape, f)?;
            let total = phase1_loss(tape, logits, y)?;
            Ok(Phase3Terms {
                total,
                cls: tape.value(total).item(),
                apcl: 0.0,
                mix: 0.0,
                apcl_skipped: 0,
            })
        },
    )
}

/// Mean encoder feature per class over `data`; absent classes are omitted.
pub fn extract_prototypes(model: &Model, data: &Dataset, owner: usize) -> Result<PrototypeSet> {
    if data.is_empty() {
        return Err(ProtocolError::Input(format!(
            "client {owner} has no samples to build prototypes from"
        )));
    }
    let feats = model.encode(&data.features)?;
    let d = feats.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &label) in data.labels.iter().enumerate() {
        let (sum, count) = sums.entry(label).or_insert_with(|| (vec![0.0; d], 0));
        for (s, v) in sum.iter_mut().zip(feats.row(i)) {
            *s += v;
        }
        *count += 1;
    }
    let mut set = PrototypeSet::new(d, PrototypeFlavor::Local, PrototypeSource::Client(owner));
    for (k, (sum, count)) in sums {
        set.insert(k, sum.into_iter().map(|s| s / count as f64).collect())?;
    }
    Ok(set)
}

/// Per-class mean over the clients that have the class.
pub fn aggregate_global_prototypes(sets: &[&PrototypeSet]) -> Result<PrototypeSet> {
    let first = sets
        .first()
        .ok_or_else(|| ProtocolError::Input("no prototype sets to aggregate".into()))?;
    let d = first.dim;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for set in sets {
        if set.dim != d {
            return Err(ProtocolError::Input(format!(
                "prototype dims {} and {} differ",
                d, set.dim
            )));
        }
        for (&k, v) in &set.entries {
            let (sum, count) = sums.entry(k).or_insert_with(|| (vec![0.0; d], 0));
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            *count += 1;
        }
    }
    let mut out = PrototypeSet::new(d, PrototypeFlavor::Global, PrototypeSource::Server);
    for (k, (sum, count)) in sums {
        out.insert(k, sum.into_iter().map(|s| s / count as f64).collect())?;
    }
    Ok(out)
}

/// `values[i][j]`: cross entropy of classifier `i` on the prototypes of client `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    pub clients: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl ConsistencyMatrix {
    pub fn from_values(clients: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = clients.len();
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(ProtocolError::Input(format!("matrix must be {n}x{n}")));
        }
        Ok(ConsistencyMatrix { clients, values })
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }
}

/// Scores every classifier against every client's prototypes.
/// `classifiers[i]` and `prototypes[i]` both belong to `clients[i]`.
pub fn build_consistency_matrix(
    clients: &[usize],
    classifiers: &[&ClassifierParams],
    prototypes: &[&PrototypeSet],
) -> Result<ConsistencyMatrix> {
    let n = clients.len();
    if n < 2 || classifiers.len() != n || prototypes.len() != n {
        return Err(ProtocolError::Input(format!(
            "matrix needs >= 2 clients with one classifier and prototype set each (got {n}, {}, {})",
            classifiers.len(),
            prototypes.len()
        )));
    }
    let banks = prototypes
        .iter()
        .zip(clients)
        .map(|(set, &c)| {
            if set.is_empty() {
                Err(ProtocolError::Matrix {
                    client: c,
                    reason: "empty prototype set".into(),
                })
            } else {
                Ok(set.to_matrix())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![vec![0.0; n]; n];
    for (i, head) in classifiers.iter().enumerate() {
        for (j, (protos, labels)) in banks.iter().enumerate() {
            let mut tape = Tape::new();
            let logits = tape.constant(head.logits(protos)?);
            let ce = tape.softmax_cross_entropy(logits, labels)?;
            values[i][j] = tape.value(ce).item();
        }
    }
    Ok(ConsistencyMatrix {
        clients: clients.to_vec(),
        values,
    })
}

/// Which client each model goes to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BroadcastPlan {
    pub strategy: Strategy,
    /// `(source, target)` pairs in ascending source order.
    pub assignment: Vec<(usize, usize)>,
    pub matrix: Option<ConsistencyMatrix>,
}

impl BroadcastPlan {
    pub fn target_of(&self, source: usize) -> Option<usize> {
        self.assignment
            .iter()
            .find(|(s, _)| *s == source)
            .map(|&(_, t)| t)
    }

    pub fn source_of(&self, target: usize) -> Option<usize> {
        self.assignment
            .iter()
            .find(|(_, t)| *t == target)
            .map(|&(s, _)| s)
    }

    /// Bijective with no fixed points.
    pub fn is_derangement(&self) -> bool {
        let mut sources: Vec<usize> = self.assignment.iter().map(|p| p.0).collect();
        let mut targets: Vec<usize> = self.assignment.iter().map(|p| p.1).collect();
        sources.sort_unstable();
        targets.sort_unstable();
        sources == targets
            && sources.windows(2).all(|w| w[0] != w[1])
            && self.assignment.iter().all(|(s, t)| s != t)
    }

    /// Sum of `matrix[source][target]` over the plan.
    pub fn cost(&self, matrix: &ConsistencyMatrix) -> f64 {
        let pos = |id: usize| {
            matrix
                .clients
                .iter()
                .position(|&c| c == id)
                .expect("plan ids come from matrix")
        };
        self.assignment
            .iter()
            .map(|&(s, t)| matrix.values[pos(s)][pos(t)])
            .sum()
    }

    /// Compact form like `0>2 1>0 2>1`.
    pub fn encode(&self) -> String {
        self.assignment
            .iter()
            .map(|(s, t)| format!("{s}>{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Greedy sequential assignment by ascending source position.
///
/// Self-assignment and already-taken targets are excluded; ties go to the
/// lowest target. When two sources remain and the last one's own slot is
/// still free, the earlier source must take it or the last would be left
/// with itself.
fn greedy_targets(values: &[Vec<f64>], minimize: bool) -> Vec<usize> {
    let n = values.len();
    let mut taken = vec![false; n];
    let mut targets = vec![0; n];
    for j in 0..n {
        let choice = if n - j == 2 && !taken[n - 1] {
            n - 1
        } else {
            let mut best: Option<usize> = None;
            for p in (0..n).filter(|&p| p != j && !taken[p]) {
                let better = match best {
                    None => true,
                    Some(b) if minimize => values[j][p] < values[j][b],
                    Some(b) => values[j][p] > values[j][b],
                };
                if better {
                    best = Some(p);
                }
            }
            best.expect("a free non-self target always remains")
        };
        taken[choice] = true;
        targets[j] = choice;
    }
    targets
}

fn random_derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(Stream::Broadcast, &[seed]);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Chooses a target client for every participating model.
pub fn build_broadcast_plan(
    matrix: &ConsistencyMatrix,
    strategy: Strategy,
    seed: u64,
) -> Result<BroadcastPlan> {
    let n = matrix.len();
    if strategy == Strategy::None {
        return Ok(BroadcastPlan {
            strategy,
            assignment: Vec::new(),
            matrix: None,
        });
    }
    if n < 2 {
        return Err(ProtocolError::Input(format!(
            "broadcast needs >= 2 clients, got {n}"
        )));
    }
    let targets = match strategy {
        Strategy::Consistency => greedy_targets(&matrix.values, true),
        Strategy::Inconsistency => greedy_targets(&matrix.values, false),
        Strategy::Random => random_derangement(n, seed),
        Strategy::None => unreachable!(),
    };
    let ids = &matrix.clients;
    Ok(BroadcastPlan {
        strategy,
        assignment: targets
            .iter()
            .enumerate()
            .map(|(j, &t)| (ids[j], ids[t]))
            .collect(),
        matrix: Some(matrix.clone()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossTrainOutcome {
    pub stats: TrainStats,
    /// Received model on this client's test split, before training.
    pub received_accuracy: f64,
    /// The same model after training.
    pub trained_accuracy: f64,
    pub origin: usize,
}

/// Retrains the received model on this client's shard under fused
/// prototype guidance; the result becomes the client's model.
pub fn run_phase3_cross_training(
    client: &mut ClientState,
    params: &TrainParams,
    weights: &LossWeights,
    partner: MfaPartner,
) -> Result<CrossTrainOutcome> {
    let bundle = client.received.take().ok_or_else(|| {
        ProtocolError::Contract(format!(
            "client {} has no received model to cross-train",
            client.id
        ))
    })?;
    let fused = fuse_prototypes(&bundle.local, &bundle.global, weights.lambda_fuse)?;
    let mut model = bundle.snapshot.model;
    let received_accuracy = accuracy(&model, &client.shard.test)?;
    let stats = sgd_epochs(
        &mut model,
        &client.shard,
        params,
        "cross training",
        |tape, bound, x, y, pairing| {
            Ok(phase3_loss(
                tape, bound, x, y, &fused, weights, partner, pairing,
            )?)
        },
    )?;
    let trained_accuracy = accuracy(&model, &client.shard.test)?;
    client.model = model;
    Ok(CrossTrainOutcome {
        stats,
        received_accuracy,
        trained_accuracy,
        origin: bundle.snapshot.origin_client,
    })
}

/// Local training plus the prototypes and test accuracy of the result.
fn local_update(
    mut client: ClientState,
    params: &TrainParams,
) -> Result<(Model, PrototypeSet, TrainStats, f64)> {
    let stats = run_phase1_local_training(&mut client, params)?;
    let protos = extract_prototypes(&client.model, &client.shard.train, client.id)?;
    let pre = accuracy(&client.model, &client.shard.test)?;
    Ok((client.model, protos, stats, pre))
}

/// Aggregated server model.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub model: Model,
    /// Rounds completed so far.
    pub round: usize,
}

/// Coordinate-wise average weighted by `sizes[i] / Σ sizes`, summed in input order.
pub fn aggregate(models: &[&Model], sizes: &[usize]) -> Result<Model> {
    let first = models
        .first()
        .ok_or_else(|| ProtocolError::Input("nothing to aggregate".into()))?;
    if models.len() != sizes.len() {
        return Err(ProtocolError::Input("one size per model required".into()));
    }
    let config = first.config();
    if let Some(bad) = models.iter().position(|m| m.config() != config) {
        return Err(ProtocolError::Input(format!(
            "model {bad} has a different architecture"
        )));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(ProtocolError::Input("total dataset size is zero".into()));
    }
    let mut acc = vec![0.0; first.num_params()];
    for (m, &size) in models.iter().zip(sizes) {
        let w = size as f64 / total as f64;
        for (a, p) in acc.iter_mut().zip(m.flatten()) {
            *a += w * p;
        }
    }
    let mut out = (*first).clone();
    out.load_flat(&acc)?;
    Ok(out)
}

/// Server state persisted between rounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServerCheckpoint {
    pub format_version: u32,
    pub master_seed: u64,
    pub rounds_completed: usize,
    pub global: serde_json::Value,
}

impl ServerCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| ProtocolError::Input(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: ServerCheckpoint =
            serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            ))
            .into());
        }
        Ok(ckpt)
    }
}

/// All parties plus the server.
#[derive(Clone, Debug)]
pub struct Federation {
    pub clients: Vec<ClientState>,
    pub global: GlobalModel,
    pub pooled_test: Dataset,
    pub master_seed: u64,
    pub exec: ExecMode,
}

impl Federation {
    pub fn new(shards: Vec<Shard>, model_config: &ModelConfig, master_seed: u64) -> Result<Self> {
        if shards.len() < 2 {
            return Err(ProtocolError::Input(
                "a federation needs >= 2 clients".into(),
            ));
        }
        let pooled = pooled_test(&shards)?;
        let init = Model::init(model_config, init_seed(master_seed));
        let clients = shards
            .into_iter()
            .map(|s| ClientState::new(s, init.clone()))
            .collect();
        Ok(Federation {
            clients,
            global: GlobalModel {
                model: init,
                round: 0,
            },
            pooled_test: pooled,
            master_seed,
            exec: ExecMode::default(),
        })
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    /// ⌈C·N⌉ clients, uniformly without replacement, re-drawn every round.
    pub fn sample_participants(&self, client_fraction: f64, round: usize) -> Vec<usize> {
        let n = self.clients.len();
        let count = ((client_fraction * n as f64).ceil() as usize).clamp(1, n);
        if count == n {
            return (0..n).collect();
        }
        let mut rng = rng_for(Stream::Sampling, &[self.master_seed, round as u64]);
        sample_without_replacement(&mut rng, n, count)
    }

    fn train_params(&self, cfg: &ProtocolConfig, epochs: usize, seed: u64) -> TrainParams {
        TrainParams {
            epochs,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            seed,
        }
    }

    /// Runs one full round and advances the global model.
    pub fn run_round(&mut self, cfg: &ProtocolConfig) -> Result<RoundMetrics> {
        let started = Instant::now();
        let round = self.global.round;
        let participants = self.sample_participants(cfg.client_fraction, round);
        let mut active = vec![false; self.clients.len()];
        for &p in &participants {
            active[p] = true;
        }

        // Local training from the synchronized global model.
        let master = self.master_seed;
        let results = map_ordered(self.exec, &participants, |&id| {
            let mut client = self.clients[id].clone();
            client.model = self.global.model.clone();
            let params =
                self.train_params(cfg, cfg.local_epochs, local_train_seed(master, round, id));
            local_update(client, &params)
        });
        let mut phase1_loss_sum = 0.0;
        let mut pre_exchange = vec![0.0; self.clients.len()];
        for (&id, r) in participants.iter().zip(results) {
            let (model, protos, stats, pre) = r?;
            self.clients[id].model = model;
            self.clients[id].last_local_prototypes = Some(protos);
            phase1_loss_sum += stats.mean_total;
            pre_exchange[id] = pre;
        }

        let mut plans = Vec::new();
        let mut cross_sums = (0.0, 0.0, 0.0, 0usize, 0usize);
        if cfg.strategy != Strategy::None && participants.len() >= 2 {
            // Prototype sets travel with the model they were computed from.
            let mut lineage: Vec<PrototypeSet> = participants
                .iter()
                .map(|&id| {
                    self.clients[id]
                        .last_local_prototypes
                        .clone()
                        .expect("set in local training")
                })
                .collect();
            let mut global_protos =
                aggregate_global_prototypes(&lineage.iter().collect::<Vec<_>>())?;
            let mut plan: Option<BroadcastPlan> = None;

            for exchange in 0..cfg.exchange_iterations {
                if exchange > 0 && cfg.refresh_prototypes_per_exchange {
                    lineage = participants
                        .iter()
                        .map(|&id| {
                            extract_prototypes(
                                &self.clients[id].model,
                                &self.clients[id].shard.train,
                                id,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    global_protos =
                        aggregate_global_prototypes(&lineage.iter().collect::<Vec<_>>())?;
                    plan = None;
                }
                let current = match plan.take() {
                    Some(p) => p,
                    None => {
                        let seed = derive_seed(&[
                            master,
                            round as u64,
                            exchange as u64,
                            Stream::Broadcast as u64,
                        ]);
                        let matrix = if matches!(cfg.strategy, Strategy::Random) {
                            ConsistencyMatrix {
                                clients: participants.clone(),
                                values: vec![vec![0.0; participants.len()]; participants.len()],
                            }
                        } else {
                            let heads: Vec<&ClassifierParams> = participants
                                .iter()
                                .map(|&id| &self.clients[id].model.classifier)
                                .collect();
                            build_consistency_matrix(
                                &participants,
                                &heads,
                                &lineage.iter().collect::<Vec<_>>(),
                            )?
                        };
                        let mut p = build_broadcast_plan(&matrix, cfg.strategy, seed)?;
                        if cfg.strategy == Strategy::Random {
                            p.matrix = None;
                        }
                        p
                    }
                };
                plans.push(current.encode());

                let pos = |id: usize| {
                    participants
                        .iter()
                        .position(|&p| p == id)
                        .expect("participant")
                };
                let mut next_lineage = lineage.clone();
                let bundles: Vec<(usize, ReceivedBundle)> = current
                    .assignment
                    .iter()
                    .map(|&(src, dst)| {
                        next_lineage[pos(dst)] = lineage[pos(src)].clone();
                        (
                            dst,
                            ReceivedBundle {
                                snapshot: ModelSnapshot::new(
                                    self.clients[src].model.clone(),
                                    src,
                                    round,
                                ),
                                local: lineage[pos(src)].clone(),
                                global: global_protos.clone(),
                            },
                        )
                    })
                    .collect();
                for (dst, bundle) in bundles {
                    self.clients[dst].received = Some(bundle);
                }

                let jobs = participants.clone();
                let this = &*self;
                let results = map_ordered(self.exec, &jobs, |&id| {
                    let mut client = this.clients[id].clone();
                    let params = this.train_params(
                        cfg,
                        cfg.cross_epochs,
                        cross_train_seed(master, round, exchange, id),
                    );
                    run_phase3_cross_training(&mut client, &params, &cfg.weights, cfg.mfa_partner)
                        .map(|outcome| (client.model, outcome))
                });
                for (&id, r) in jobs.iter().zip(results) {
                    let (model, outcome) = r?;
                    self.clients[id].model = model;
                    self.clients[id].received = None;
                    cross_sums.0 += outcome.stats.mean_cls;
                    cross_sums.1 += outcome.stats.mean_apcl;
                    cross_sums.2 += outcome.stats.mean_mix;
                    cross_sums.3 += outcome.stats.apcl_skipped;
                    cross_sums.4 += 1;
                }
                lineage = next_lineage;
                plan = Some(current);
            }
        }

        let models: Vec<&Model> = participants
            .iter()
            .map(|&id| &self.clients[id].model)
            .collect();
        let sizes: Vec<usize> = participants
            .iter()
            .map(|&id| self.clients[id].shard.train_size())
            .collect();
        let aggregated = aggregate(&models, &sizes)?;
        if !aggregated.is_finite() {
            return Err(ProtocolError::Divergence {
                client: usize::MAX,
                phase: "aggregation",
                step: round,
            });
        }

        let per_client_accuracy = participants
            .iter()
            .map(|&id| {
                let c = &self.clients[id];
                Ok(ClientAccuracy {
                    client: id,
                    pre_exchange: pre_exchange[id],
                    post_exchange: accuracy(&c.model, &c.shard.test)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        self.global = GlobalModel {
            model: aggregated,
            round: round + 1,
        };
        let global_test_accuracy = accuracy(&self.global.model, &self.pooled_test)?;
        let n_cross = cross_sums.4.max(1) as f64;
        let n_local = participants.len() as f64;
        let loss_terms = if cross_sums.4 > 0 {
            LossTerms {
                phase1: phase1_loss_sum / n_local,
                cls: cross_sums.0 / n_cross,
                apcl: cross_sums.1 / n_cross,
                mix: cross_sums.2 / n_cross,
            }
        } else {
            LossTerms {
                phase1: phase1_loss_sum / n_local,
                cls: phase1_loss_sum / n_local,
                apcl: 0.0,
                mix: 0.0,
            }
        };

        Ok(RoundMetrics {
            round: round + 1,
            global_test_accuracy,
            per_client_accuracy,
            loss_terms,
            broadcast_plans: plans,
            apcl_skip_count: cross_sums.3,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn checkpoint(&self) -> ServerCheckpoint {
        ServerCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            master_seed: self.master_seed,
            rounds_completed: self.global.round,
            global: ModelSnapshot::new(self.global.model.clone(), usize::MAX, self.global.round)
                .to_value(),
        }
    }

    /// Resumes from a checkpoint taken on a federation with the same seed and data.
    pub fn restore(&mut self, ckpt: ServerCheckpoint) -> Result<()> {
        if ckpt.master_seed != self.master_seed {
            return Err(ProtocolError::Input(format!(
                "checkpoint seed {} does not match federation seed {}",
                ckpt.master_seed, self.master_seed
            )));
        }
        let snap = ModelSnapshot::from_value(ckpt.global)?;
        if snap.model.config() != self.global.model.config() {
            return Err(ModelError::Architecture("checkpoint architecture differs".into()).into());
        }
        self.global = GlobalModel {
            model: snap.model,
            round: ckpt.rounds_completed,
        };
        Ok(())
    }
}
