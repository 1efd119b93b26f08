mod common;

use common::{fedavg_reference, linf};
use fedct_core::config::ExperimentConfig;
use fedct_core::experiment::{build_federation, run_seed, RunOptions};
use fedct_core::metrics::accuracy;

fn fedavg_config(rounds: usize) -> ExperimentConfig {
    ExperimentConfig::parse_with_overrides(
        "",
        &[
            "fedct.strategy=none".into(),
            "fedct.kappa=0.0".into(),
            "fedct.eta=0.0".into(),
            format!("train.rounds={rounds}"),
            "data.per_class=60".into(),
        ],
    )
    .unwrap()
}

#[test]
fn pipeline_without_exchange_is_fedavg() {
    let cfg = fedavg_config(5);
    let seed = 3;
    let reference = fedavg_reference(&cfg, seed);
    let (_, fed) = build_federation(&cfg, seed).unwrap();
    let mut fed = fed;
    let protocol = cfg.protocol_config();
    for expected in &reference {
        let m = fed.run_round(&protocol).unwrap();
        assert!(m.broadcast_plans.is_empty());
        let d = linf(&fed.global.model, expected);
        assert!(d < 1e-12, "round {} L-inf {d:e}", m.round);
    }
}

#[test]
fn summary_matches_reference_accuracy() {
    let cfg = fedavg_config(3);
    let seed = 8;
    let reference = fedavg_reference(&cfg, seed);
    let (result, fed) = run_seed(&cfg, seed, None, RunOptions::default()).unwrap();
    for (r, model) in reference.iter().enumerate() {
        assert_eq!(
            result.trajectory[r],
            accuracy(model, &fed.pooled_test).unwrap()
        );
    }
}
