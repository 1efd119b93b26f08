use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use fedct_core::config::ExperimentConfig;
use fedct_core::exec::ExecMode;
use fedct_core::experiment::build_federation;

fn round(c: &mut Criterion) {
    let cfg = ExperimentConfig::parse_with_overrides("", &["partition.beta=0.1".into()]).unwrap();
    let protocol = cfg.protocol_config();
    let (_, fed) = build_federation(&cfg, 1).unwrap();

    let mut group = c.benchmark_group("run_round");
    group.sample_size(10);
    for (name, mode) in [
        ("sequential", ExecMode::Sequential),
        ("parallel", ExecMode::Parallel),
    ] {
        group.bench_function(name, |b| {
            b.iter_batched(
                || fed.clone().with_exec(mode),
                |mut f| f.run_round(&protocol).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, round);
criterion_main!(benches);
