use fedct_core::data::{make_synthetic, Dataset};
use fedct_core::losses::{fuse_prototypes, PrototypeFlavor, PrototypeSet, PrototypeSource};
use fedct_core::model::{Model, ModelConfig};
use fedct_core::protocol::{
    aggregate, aggregate_global_prototypes, build_broadcast_plan, build_consistency_matrix,
    extract_prototypes, ConsistencyMatrix, Strategy as Broadcast,
};
use fedct_core::tensor::Tensor;
use proptest::prelude::*;

fn matrix(n: usize, values: Vec<f64>) -> ConsistencyMatrix {
    let rows = values.chunks(n).map(<[f64]>::to_vec).collect();
    ConsistencyMatrix::from_values((0..n).collect(), rows).unwrap()
}

fn matrix_strategy() -> impl Strategy<Value = ConsistencyMatrix> {
    (2usize..=10).prop_flat_map(|n| {
        prop::collection::vec(0.0f64..10.0, n * n).prop_map(move |v| matrix(n, v))
    })
}

/// Minimum cost over all derangements, by enumeration.
fn optimal_derangement_cost(m: &ConsistencyMatrix) -> f64 {
    fn go(j: usize, used: &mut [bool], acc: f64, m: &ConsistencyMatrix, best: &mut f64) {
        let n = used.len();
        if acc >= *best {
            return;
        }
        if j == n {
            *best = acc;
            return;
        }
        for t in 0..n {
            if t != j && !used[t] {
                used[t] = true;
                go(j + 1, used, acc + m.values[j][t], m, best);
                used[t] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, &mut vec![false; m.len()], 0.0, m, &mut best);
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn every_plan_is_a_derangement(m in matrix_strategy(), seed in any::<u64>()) {
        for s in [Broadcast::Consistency, Broadcast::Inconsistency, Broadcast::Random] {
            let plan = build_broadcast_plan(&m, s, seed).unwrap();
            prop_assert_eq!(plan.assignment.len(), m.len());
            prop_assert!(plan.is_derangement(), "{:?}: {}", s, plan.encode());
        }
    }

    #[test]
    fn first_source_choice_is_ordered(m in matrix_strategy()) {
        let c = build_broadcast_plan(&m, Broadcast::Consistency, 0).unwrap();
        let i = build_broadcast_plan(&m, Broadcast::Inconsistency, 0).unwrap();
        let (tc, ti) = (c.target_of(0).unwrap(), i.target_of(0).unwrap());
        prop_assert!(m.values[0][tc] <= m.values[0][ti]);
    }
}

#[test]
fn greedy_plan_costs_can_invert_for_three_clients() {
    // Row 0 alone picks the cycle; the cheaper first hop leads into the expensive one.
    let m = matrix(3, vec![0.0, 1.0, 2.0, 3.0, 0.0, 100.0, 4.0, 5.0, 0.0]);
    let c = build_broadcast_plan(&m, Broadcast::Consistency, 0).unwrap();
    let i = build_broadcast_plan(&m, Broadcast::Inconsistency, 0).unwrap();
    assert_eq!(c.encode(), "0>1 1>2 2>0");
    assert_eq!(i.encode(), "0>2 1>0 2>1");
    assert!(c.cost(&m) > i.cost(&m));
}

#[test]
fn greedy_gap_to_optimal_stays_small() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 1.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let m = matrix(
            n,
            (0..n * n).map(|_| rng.random_range(0.01..10.0)).collect(),
        );
        let greedy = build_broadcast_plan(&m, Broadcast::Consistency, 0)
            .unwrap()
            .cost(&m);
        let best = optimal_derangement_cost(&m);
        assert!(greedy >= best - 1e-12);
        worst = worst.max(greedy / best);
    }
    eprintln!("worst greedy/optimal cost ratio over 200 matrices: {worst:.3}");
}

#[test]
fn two_clients_always_swap_and_none_is_empty() {
    let m = matrix(2, vec![0.0, 5.0, 1.0, 0.0]);
    for s in [
        Broadcast::Consistency,
        Broadcast::Inconsistency,
        Broadcast::Random,
    ] {
        assert_eq!(build_broadcast_plan(&m, s, 3).unwrap().encode(), "0>1 1>0");
    }
    assert!(build_broadcast_plan(&m, Broadcast::None, 0)
        .unwrap()
        .assignment
        .is_empty());
    let one = ConsistencyMatrix::from_values(vec![4], vec![vec![0.0]]).unwrap();
    assert!(build_broadcast_plan(&one, Broadcast::Consistency, 0).is_err());
}

#[test]
fn greedy_plan_follows_row_order_with_lowest_id_ties() {
    let m = matrix(3, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 3.0, 3.0, 0.0]);
    let plan = build_broadcast_plan(&m, Broadcast::Consistency, 0).unwrap();
    // Row 1 would pick 0 (tied with 2, lowest id wins) and strand row 2 on itself,
    // so it is forced onto 2.
    assert_eq!(plan.encode(), "0>1 1>2 2>0");
    let plan = build_broadcast_plan(&m, Broadcast::Inconsistency, 0).unwrap();
    assert_eq!(plan.encode(), "0>2 1>0 2>1");
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_dim: 4,
        hidden: vec![6],
        feature_dim: 3,
        num_classes: 3,
    }
}

#[test]
fn extract_prototypes_matches_brute_force() {
    let data = make_synthetic(3, 7, 4, 2.0, 5).unwrap();
    let model = Model::init(&tiny_config(), 9);
    let protos = extract_prototypes(&model, &data, 0).unwrap();
    for k in 0..3 {
        let mut sum = [0.0; 3];
        let mut count = 0.0;
        for i in 0..data.len() {
            if data.labels[i] == k {
                let row = Tensor::row_vector(data.features.row(i));
                let f = model.encode(&row).unwrap();
                for (s, v) in sum.iter_mut().zip(f.data()) {
                    *s += v;
                }
                count += 1.0;
            }
        }
        for (p, s) in protos.get(k).unwrap().iter().zip(sum) {
            assert!((p - s / count).abs() < 1e-12);
        }
    }
    assert_eq!(protos.flavor, PrototypeFlavor::Local);
    assert_eq!(protos.source, PrototypeSource::Client(0));
}

#[test]
fn extract_prototypes_omits_absent_classes_and_rejects_empty() {
    let data = make_synthetic(3, 4, 4, 2.0, 5).unwrap();
    let only_first: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == 0).collect();
    let model = Model::init(&tiny_config(), 1);
    let p = extract_prototypes(&model, &data.subset(&only_first), 2).unwrap();
    assert_eq!(p.classes(), vec![0]);
    let empty = Dataset::new(Tensor::zeros(0, 4), vec![], 3).unwrap();
    assert!(extract_prototypes(&model, &empty, 0).is_err());
}

fn set(entries: &[(usize, [f64; 2])]) -> PrototypeSet {
    let mut s = PrototypeSet::new(2, PrototypeFlavor::Local, PrototypeSource::Client(0));
    for (k, v) in entries {
        s.insert(*k, v.to_vec()).unwrap();
    }
    s
}

#[test]
fn global_prototypes_average_contributing_clients_only() {
    let a = set(&[(0, [1.0, 2.0]), (1, [0.5, 0.5])]);
    let b = set(&[(0, [3.0, -2.0])]);
    let c = set(&[(0, [0.1, 0.7]), (2, [9.0, 9.0])]);
    let g = aggregate_global_prototypes(&[&a, &b, &c]).unwrap();
    assert_eq!(
        g.get(0).unwrap(),
        &[(1.0 + 3.0 + 0.1) / 3.0, (2.0 - 2.0 + 0.7) / 3.0]
    );
    assert_eq!(g.get(1).unwrap(), &[0.5, 0.5]);
    assert_eq!(g.get(2).unwrap(), &[9.0, 9.0]);
    assert_eq!(g.flavor, PrototypeFlavor::Global);
    assert!(aggregate_global_prototypes(&[]).is_err());

    let l = fuse_prototypes(&a, &g, 0.0).unwrap();
    let r = fuse_prototypes(&a, &g, 1.0).unwrap();
    assert_eq!(l.get(0).unwrap(), a.get(0).unwrap());
    assert_eq!(r.get(0).unwrap(), g.get(0).unwrap());
}

#[test]
fn consistency_matrix_entries_are_prototype_cross_entropy() {
    let cfg = tiny_config();
    let m0 = Model::init(&cfg, 1);
    let m1 = Model::init(&cfg, 2);
    let p0 = PrototypeSet::new(3, PrototypeFlavor::Local, PrototypeSource::Client(0));
    let mut p0 = p0;
    p0.insert(0, vec![1.0, 0.0, -1.0]).unwrap();
    p0.insert(2, vec![0.5, 0.5, 0.5]).unwrap();
    let mut p1 = PrototypeSet::new(3, PrototypeFlavor::Local, PrototypeSource::Client(1));
    p1.insert(1, vec![-0.3, 0.2, 0.9]).unwrap();

    let m =
        build_consistency_matrix(&[0, 1], &[&m0.classifier, &m1.classifier], &[&p0, &p1]).unwrap();
    let ce = |model: &Model, set: &PrototypeSet| {
        let mut total = 0.0;
        for (&k, v) in &set.entries {
            let z = model.classifier.logits(&Tensor::row_vector(v)).unwrap();
            let z = z.data();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - z[k];
        }
        total / set.len() as f64
    };
    for (i, mi) in [&m0, &m1].into_iter().enumerate() {
        for (j, pj) in [&p0, &p1].into_iter().enumerate() {
            assert!((m.values[i][j] - ce(mi, pj)).abs() < 1e-12);
        }
    }
    let empty = PrototypeSet::new(3, PrototypeFlavor::Local, PrototypeSource::Client(1));
    assert!(
        build_consistency_matrix(&[0, 1], &[&m0.classifier, &m1.classifier], &[&p0, &empty])
            .is_err()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_stays_in_the_convex_hull(seeds in prop::collection::vec(any::<u64>(), 1..6), sizes in prop::collection::vec(1usize..500, 6)) {
        let cfg = tiny_config();
        let models: Vec<Model> = seeds.iter().map(|&s| Model::init(&cfg, s)).collect();
        let refs: Vec<&Model> = models.iter().collect();
        let agg = aggregate(&refs, &sizes[..models.len()]).unwrap().flatten();
        let flats: Vec<Vec<f64>> = models.iter().map(Model::flatten).collect();
        for (c, v) in agg.iter().enumerate() {
            let lo = flats.iter().map(|f| f[c]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }

        let equal = vec![7; models.len()];
        let mean = aggregate(&refs, &equal).unwrap().flatten();
        for (c, v) in mean.iter().enumerate() {
            let m = flats.iter().map(|f| f[c]).sum::<f64>() / flats.len() as f64;
            prop_assert!((v - m).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregation_rejects_bad_input() {
    let a = Model::init(&tiny_config(), 0);
    let b = Model::init(
        &ModelConfig {
            hidden: vec![5],
            ..tiny_config()
        },
        0,
    );
    assert!(aggregate(&[], &[]).is_err());
    assert!(aggregate(&[&a, &b], &[1, 1]).is_err());
    assert!(aggregate(&[&a], &[0]).is_err());
    assert!(aggregate(&[&a], &[1, 2]).is_err());
}
