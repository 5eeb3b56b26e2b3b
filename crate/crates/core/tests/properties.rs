use dfca::datagen::{self, Dataset, SyntheticSpec};
use dfca::dfca::{self as core, argmin_finite};
use dfca::metrics;
use dfca::topology::{self, MixingKind, MixingMatrix, Topology};
use dfca::{AggregationMode, ClientState, FlatParams, MlpModel, ModelShape, RoundPlan};
use proptest::prelude::*;

fn states_from(models: &[Vec<Vec<f64>>], assignments: &[usize]) -> Vec<ClientState> {
    let len = models[0][0].len();
    let shape = ModelShape::new(len - 1, 0, 1);
    let data = Dataset::new(len - 1, vec![0.0; len - 1], vec![0], 0).unwrap();
    models
        .iter()
        .zip(assignments)
        .enumerate()
        .map(|(i, (ms, &a))| {
            let models = ms.iter().cloned().map(FlatParams).collect();
            let mut s = ClientState::new(i, shape, models, data.clone()).unwrap();
            s.assignment = a;
            s.outbox = Some((a, s.models[a].clone()));
            s
        })
        .collect()
}

/// `(n, k, models[n][k][len], assignments[n], edge mask)`.
type Network = (usize, usize, Vec<Vec<Vec<f64>>>, Vec<usize>, Vec<bool>);

fn network() -> impl Strategy<Value = Network> {
    (1usize..=8, 1usize..=4, 2usize..=4).prop_flat_map(|(n, k, len)| {
        (
            Just(n),
            Just(k),
            prop::collection::vec(prop::collection::vec(prop::collection::vec(-100.0..100.0f64, len), k), n),
            prop::collection::vec(0..k, n),
            prop::collection::vec(any::<bool>(), n * (n - 1) / 2),
        )
    })
}

fn graph(n: usize, mask: &[bool]) -> Topology {
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |m| (i, m)))
        .zip(mask)
        .filter(|(_, &on)| on)
        .map(|(e, _)| e)
        .collect();
    Topology::from_edges(n, &edges).unwrap()
}

proptest! {
    #[test]
    fn flat_params_bytes_round_trip(values in prop::collection::vec(any::<f64>(), 0..64)) {
        let p = FlatParams(values);
        let bytes = p.to_bytes();
        prop_assert_eq!(bytes.len(), 8 + 8 * p.len());
        let back = FlatParams::from_bytes(&bytes).unwrap();
        let bits = |v: &FlatParams| v.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&p));
    }

    #[test]
    fn flat_params_rejects_any_truncation(values in prop::collection::vec(-1.0..1.0f64, 1..16), cut in 1usize..8) {
        let bytes = FlatParams(values).to_bytes();
        prop_assert!(FlatParams::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn image_rotations_compose(side in 1usize..7, seed in any::<u64>()) {
        let img: Vec<f64> = (0..side * side).map(|i| (i as u64 ^ seed) as f64).collect();
        let mut quarter = img.clone();
        for _ in 0..4 {
            quarter = datagen::rotate_image(&quarter, 90).unwrap();
        }
        prop_assert_eq!(&quarter, &img);
        let half = datagen::rotate_image(&datagen::rotate_image(&img, 180).unwrap(), 180).unwrap();
        prop_assert_eq!(&half, &img);
        let two_quarters = datagen::rotate_image(&datagen::rotate_image(&img, 90).unwrap(), 90).unwrap();
        prop_assert_eq!(two_quarters, datagen::rotate_image(&img, 180).unwrap());
    }

    #[test]
    fn undoing_cluster_rotation_gives_cluster_zero(k in prop::sample::select(vec![2usize, 4]), j in 0usize..4, seed in any::<u64>(), planes in prop::option::of(1usize..=3)) {
        let j = j % k;
        let spec = SyntheticSpec { samples_per_client: 12, dim: 6, rotation_planes: planes, ..SyntheticSpec::default() };
        let base = datagen::generate_rotated_synthetic(&spec, k, 0, seed).unwrap();
        let rotated = datagen::generate_rotated_synthetic(&spec, k, j, seed).unwrap();
        prop_assert_eq!(base.labels(), rotated.labels());
        let quarter_turns = (4 - j * 4 / k) % 4;
        for i in 0..base.len() {
            let mut x = rotated.sample(i).to_vec();
            for p in 0..spec.planes() {
                for _ in 0..quarter_turns {
                    (x[2 * p], x[2 * p + 1]) = (-x[2 * p + 1], x[2 * p]);
                }
            }
            prop_assert_eq!(&x[..], base.sample(i));
        }
    }

    #[test]
    fn sequential_matches_batch_for_seeded_orders((n, _k, models, assignments, mask) in network(), seed in any::<u64>(), metropolis in any::<bool>()) {
        let t = graph(n, &mask);
        let states = states_from(&models, &assignments);
        let mixing = if metropolis { MixingKind::Metropolis } else { MixingKind::PaperUniform };
        let mut batch = states.clone();
        let mut plan = RoundPlan::full(n, 3, seed, AggregationMode::Batch);
        plan.mixing = mixing;
        core::aggregate_batch(&mut batch, &t, &plan);
        let mut seq = states;
        plan.aggregation = AggregationMode::Sequential;
        core::aggregate_sequential(&mut seq, &t, &plan);
        for (a, b) in seq.iter().zip(&batch) {
            for (ma, mb) in a.models.iter().zip(&b.models) {
                for (x, y) in ma.0.iter().zip(&mb.0) {
                    prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{} vs {}", x, y);
                }
            }
        }
    }

    #[test]
    fn aggregation_leaves_unreached_models_alone((n, k, models, assignments, mask) in network()) {
        let t = graph(n, &mask);
        let before = states_from(&models, &assignments);
        let mut after = before.clone();
        core::aggregate_batch(&mut after, &t, &RoundPlan::full(n, 0, 0, AggregationMode::Batch));
        for i in 0..n {
            for j in 0..k {
                if core::neighborhood_split(&before, &t, i, j).is_empty() {
                    prop_assert_eq!(&after[i].models[j], &before[i].models[j]);
                }
            }
        }
    }

    #[test]
    fn dispersion_is_translation_invariant(copies in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 1..10), shift in prop::collection::vec(-50.0..50.0f64, 3)) {
        let a: Vec<FlatParams> = copies.iter().cloned().map(FlatParams).collect();
        let b: Vec<FlatParams> = copies
            .iter()
            .map(|c| FlatParams(c.iter().zip(&shift).map(|(x, s)| x + s).collect()))
            .collect();
        let da = metrics::dispersion_of(&a.iter().collect::<Vec<_>>());
        let db = metrics::dispersion_of(&b.iter().collect::<Vec<_>>());
        prop_assert!(da >= 0.0);
        prop_assert!((da - db).abs() <= 1e-9 * (1.0 + da), "{} vs {}", da, db);
    }

    #[test]
    fn identical_copies_have_zero_dispersion(v in prop::collection::vec(-1e6..1e6f64, 1..8), n in 1usize..30) {
        let p = FlatParams(v);
        prop_assert_eq!(metrics::dispersion_of(&vec![&p; n]), 0.0);
    }

    #[test]
    fn clustering_accuracy_ignores_label_names(truth in prop::collection::vec(0usize..4, 1..30), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(), flips in prop::collection::vec(any::<bool>(), 30)) {
        let predicted: Vec<usize> = truth.iter().zip(&flips).map(|(&t, &f)| if f { (t + 1) % 4 } else { t }).collect();
        let renamed: Vec<usize> = predicted.iter().map(|&p| perm[p]).collect();
        let a = metrics::clustering_accuracy(&predicted, &truth);
        prop_assert_eq!(a, metrics::clustering_accuracy(&renamed, &truth));
        prop_assert_eq!(metrics::clustering_accuracy(&truth.iter().map(|&t| perm[t]).collect::<Vec<_>>(), &truth), 1.0);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn loss_ignores_sample_order(seed in any::<u64>(), order_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let spec = SyntheticSpec { samples_per_client: 20, dim: 4, ..SyntheticSpec::default() };
        let d = datagen::generate_rotated_synthetic(&spec, 1, 0, seed).unwrap();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut dfca::seed::rng(order_seed));
        let shuffled = d.select(&order).unwrap();
        let m = MlpModel::init_uniform(ModelShape::new(4, 5, spec.n_classes), seed);
        let (a, b) = (m.forward_loss(&d).unwrap(), m.forward_loss(&shuffled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        let (ga, gb) = (m.gradient(&d).unwrap(), m.gradient(&shuffled).unwrap());
        for (x, y) in ga.0.iter().zip(&gb.0) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn erdos_renyi_is_reproducible_and_simple(n in 1usize..40, p in 0.0..=1.0f64, seed in any::<u64>()) {
        let a = topology::generate_erdos_renyi(n, p, seed).unwrap();
        prop_assert_eq!(&a, &topology::generate_erdos_renyi(n, p, seed).unwrap());
        for i in 0..n {
            prop_assert!(!a.is_edge(i, i));
            for m in 0..n {
                prop_assert_eq!(a.is_edge(i, m), a.is_edge(m, i));
            }
        }
        prop_assert_eq!(&Topology::parse_edge_list(&a.to_edge_list()).unwrap(), &a);
    }

    #[test]
    fn mixing_rows_are_stochastic((n, _k, _m, _a, mask) in network()) {
        let t = graph(n, &mask);
        for kind in [MixingKind::PaperUniform, MixingKind::Metropolis] {
            let w = MixingMatrix::new(&t, kind);
            for i in 0..n {
                let row = w.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                for (m, &x) in row.iter().enumerate() {
                    prop_assert_eq!(x > 0.0, m == i || t.is_edge(i, m));
                }
            }
        }
        let w = MixingMatrix::new(&t, MixingKind::Metropolis);
        prop_assert!(w.is_symmetric(1e-15));
    }

    #[test]
    fn argmin_picks_lowest_finite(values in prop::collection::vec(prop_oneof![-5.0..5.0f64, Just(f64::NAN), Just(f64::INFINITY), Just(0.0)], 0..8)) {
        match argmin_finite(&values) {
            None => prop_assert!(values.iter().all(|v| !v.is_finite())),
            Some(j) => {
                prop_assert!(values[j].is_finite());
                for (i, &v) in values.iter().enumerate() {
                    if v.is_finite() {
                        prop_assert!(values[j] < v || (values[j] == v && j <= i));
                    }
                }
            }
        }
    }
}
