//! Plain FedAvg written independently of the protocol module.

use fedct_core::config::ExperimentConfig;
use fedct_core::data::{batches, Shard};
use fedct_core::experiment::build_federation;
use fedct_core::model::{BoundModel, Model};
use fedct_core::protocol::{epoch_seed, init_seed, local_train_seed};
use fedct_core::tensor::{Tape, Tensor};

/// Parameter tensors of `model` in flatten order.
fn tensors(model: &Model) -> Vec<Tensor> {
    let mut out = Vec::new();
    for l in &model.encoder.layers {
        out.push(l.weight.clone());
        out.push(l.bias.clone());
    }
    out.push(model.classifier.weight.clone());
    out.push(model.classifier.bias.clone());
    out
}

fn local_sgd(
    start: &Model,
    shard: &Shard,
    cfg: &ExperimentConfig,
    seed: u64,
    round: usize,
) -> Model {
    let mut params = tensors(start);
    let root = local_train_seed(seed, round, shard.owner);
    for e in 0..cfg.train.local_epochs {
        for rows in batches(shard, cfg.train.batch_size, epoch_seed(root, e)) {
            let x = shard.train.features.select_rows(&rows);
            let y: Vec<usize> = rows.iter().map(|&i| shard.train.labels[i]).collect();
            let mut tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
            let bound = BoundModel::from_vars(&vars).unwrap();
            let xv = tape.constant(x);
            let f = bound.encode(&mut tape, xv).unwrap();
            let z = bound.classify(&mut tape, f).unwrap();
            let loss = tape.softmax_cross_entropy(z, &y).unwrap();
            tape.backward(loss).unwrap();
            for (p, v) in params.iter_mut().zip(&vars) {
                let g = tape.grad(*v).unwrap();
                for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= cfg.train.lr * (gi + cfg.train.weight_decay * *w);
                }
            }
        }
    }
    let mut out = start.clone();
    let flat: Vec<f64> = params.iter().flat_map(|t| t.data().to_vec()).collect();
    out.load_flat(&flat).unwrap();
    out
}

/// Plain FedAvg: every client trains from the global model, the server
/// averages by training-set size in client order.
pub fn fedavg_reference(cfg: &ExperimentConfig, seed: u64) -> Vec<Model> {
    let (_, fed) = build_federation(cfg, seed).unwrap();
    let shards: Vec<Shard> = fed.clients.iter().map(|c| c.shard.clone()).collect();
    let mut global = Model::init(&cfg.model_config(), init_seed(seed));
    let mut history = Vec::new();
    for round in 0..cfg.train.rounds {
        let locals: Vec<Model> = shards
            .iter()
            .map(|s| local_sgd(&global, s, cfg, seed, round))
            .collect();
        let total: usize = shards.iter().map(Shard::train_size).sum();
        let mut avg = vec![0.0; global.num_params()];
        for (m, s) in locals.iter().zip(&shards) {
            let w = s.train_size() as f64 / total as f64;
            for (a, p) in avg.iter_mut().zip(m.flatten()) {
                *a += w * p;
            }
        }
        global.load_flat(&avg).unwrap();
        history.push(global.clone());
    }
    history
}

pub fn linf(a: &Model, b: &Model) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
