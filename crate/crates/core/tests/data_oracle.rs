use fedct_core::data::{dirichlet_partition, make_synthetic, pooled_test, Dataset, PartitionSpec};
use fedct_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

/// Full-batch softmax regression; returns training accuracy.
fn linear_probe(data: &Dataset, steps: usize, lr: f64) -> f64 {
    let k = data.num_classes;
    let mut w = Tensor::zeros(data.dim(), k);
    let mut b = Tensor::zeros(1, k);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let x = tape.constant(data.features.clone());
        let z = tape.matmul(x, wv).unwrap();
        let z = tape.add_row_bias(z, bv).unwrap();
        let loss = tape.softmax_cross_entropy(z, &data.labels).unwrap();
        tape.backward(loss).unwrap();
        for (p, v) in [(&mut w, wv), (&mut b, bv)] {
            let g = tape.grad(v).unwrap();
            for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
                *pi -= lr * gi;
            }
        }
    }
    let logits = data.features.matmul(&w).unwrap().add_row(&b).unwrap();
    let correct = (0..data.len())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..k).fold(0, |a, c| if row[c] > row[a] { c } else { a });
            best == data.labels[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn widely_separated_classes_are_linearly_separable() {
    for seed in 0..3 {
        let data = make_synthetic(2, 50, 8, 50.0, seed).unwrap();
        assert_eq!(linear_probe(&data, 200, 0.01), 1.0, "seed {seed}");
    }
}

#[test]
fn csv_round_trip_is_lossless() {
    let data = make_synthetic(3, 5, 4, 2.0, 1).unwrap();
    let mut buf = Vec::new();
    data.write_csv(&mut buf).unwrap();
    let back = Dataset::read_csv(buf.as_slice(), 3).unwrap();
    assert_eq!(back, data);
    assert!(Dataset::read_csv("a,b\n1,2\n".as_bytes(), 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn partition_covers_every_sample_once(clients in 2usize..8, beta in 0.05f64..5.0, seed in any::<u64>()) {
        let data = make_synthetic(4, 40, 3, 2.0, seed).unwrap();
        let spec = PartitionSpec { num_clients: clients, beta, seed, min_samples_per_client: 2 };
        let shards = dirichlet_partition(&data, &spec).unwrap();
        prop_assert_eq!(shards.len(), clients);
        let mut seen: Vec<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
        for s in &shards {
            prop_assert_eq!(s.train.len() + s.test.len(), s.indices.len());
            prop_assert_eq!(s.class_histogram.iter().sum::<usize>(), s.indices.len());
        }
        let pooled = pooled_test(&shards).unwrap();
        prop_assert_eq!(pooled.len(), shards.iter().map(|s| s.test.len()).sum::<usize>());
    }
}
