use dfca::config::{Algorithm, DataSource, OnDisconnected};
use dfca::datagen::{self, SyntheticSpec};
use dfca::dfca as core;
use dfca::experiment::{self, Experiment};
use dfca::metrics::{self, Evaluation};
use dfca::model::SgdOptions;
use dfca::topology::Topology;
use dfca::{AggregationMode, Error, ExperimentConfig, Hyperparams, InitMode, MlpModel, ModelShape, RoundPlan};

fn small(algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        n_clients: 8,
        rounds: 5,
        hidden: 8,
        data: SyntheticSpec {
            samples_per_client: 40,
            ..SyntheticSpec::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn sgd_descends_on_default_data() {
    let spec = SyntheticSpec::default();
    let shape = ModelShape::new(spec.dim, 32, spec.n_classes);
    for seed in 0..20 {
        let d = datagen::generate_rotated_synthetic(&spec, 2, (seed % 2) as usize, seed).unwrap();
        let m = MlpModel::init_uniform(shape, 1000 + seed);
        let opts = SgdOptions {
            gamma: 0.1,
            tau: 5,
            batch_size: 32,
            seed,
        };
        let before = m.forward_loss(&d).unwrap();
        let after = m.sgd_epochs(&d, &opts).unwrap().forward_loss(&d).unwrap();
        assert!(after <= before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn local_update_descends_on_average() {
    let cfg = ExperimentConfig::default();
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 0..20 {
        let e = Experiment::build(&ExperimentConfig { seed, ..cfg.clone() }).unwrap();
        let mut s = e.states[seed as usize % cfg.n_clients].clone();
        let j = s.assignment;
        before += s.loss(j).unwrap();
        s.local_update(&cfg.hyperparams(), seed).unwrap();
        after += s.loss(j).unwrap();
        assert_eq!(s.outbox.as_ref().map(|(c, _)| *c), Some(j));
    }
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn assignments_stabilize_on_default_config() {
    for seed in 0..5 {
        let trace = experiment::run_experiment(&ExperimentConfig {
            seed,
            rounds: 60,
            ..ExperimentConfig::default()
        })
        .unwrap();
        let tau = metrics::stabilization_round(&trace);
        assert!(tau.is_some_and(|t| t < 60), "seed {seed}: {tau:?}");
    }
}

#[test]
fn zero_rounds_give_an_empty_trace() {
    let cfg = ExperimentConfig { rounds: 0, ..small(Algorithm::Dfca) };
    assert!(experiment::run_experiment(&cfg).unwrap().is_empty());
    assert_eq!(metrics::trace_csv(&[], 2).lines().count(), 1);
}

#[test]
fn round_without_participants_changes_nothing() {
    let mut e = Experiment::build(&small(Algorithm::Dfca)).unwrap();
    let before: Vec<_> = e.states.iter().map(|s| s.models.clone()).collect();
    let mut plan = e.plan(0);
    plan.participants.clear();
    let m = core::run_round(&mut e.states, &e.topology, &plan, &e.config.hyperparams(), &e.eval).unwrap();
    for (s, b) in e.states.iter().zip(&before) {
        assert_eq!(&s.models, b);
    }
    assert!(m.avg_drift.iter().all(|&d| d == 0.0));
    assert_eq!(m.assignments_changed, 0);
}

#[test]
fn zero_step_size_round_on_global_init_keeps_parameters() {
    let cfg = ExperimentConfig {
        gamma: 0.0,
        init_mode: InitMode::Global,
        ..small(Algorithm::Dfca)
    };
    for mode in [AggregationMode::Batch, AggregationMode::Sequential] {
        let mut e = Experiment::build(&ExperimentConfig { aggregation_mode: mode, ..cfg.clone() }).unwrap();
        let before = e.states[0].models.clone();
        let m = e.step(0).unwrap();
        for s in &e.states {
            assert_eq!(s.models, before);
        }
        assert!(m.disp.iter().all(|&d| d == 0.0));
    }
}

#[test]
fn complete_graph_single_cluster_matches_ifca() {
    let base = ExperimentConfig {
        k: 1,
        topology_p: 1.0,
        aggregation_mode: AggregationMode::Batch,
        init_mode: InitMode::Global,
        ..small(Algorithm::Dfca)
    };
    let mut dfca = Experiment::build(&base).unwrap();
    let mut ifca = Experiment::build(&ExperimentConfig {
        algorithm: Algorithm::Ifca,
        ..base.clone()
    })
    .unwrap();
    for t in 0..base.rounds {
        let (a, b) = (dfca.step(t).unwrap(), ifca.step(t).unwrap());
        assert!((a.test_accuracy - b.test_accuracy).abs() < 1e-12);
        for (x, y) in dfca.states.iter().zip(&ifca.states) {
            for (p, q) in x.models[0].0.iter().zip(&y.models[0].0) {
                assert!((p - q).abs() < 1e-9, "round {t}: {p} vs {q}");
            }
        }
    }
}

#[test]
fn single_model_baseline_is_dfca_with_one_cluster() {
    let davg = ExperimentConfig {
        k: 1,
        ..small(Algorithm::Davg)
    };
    let dfca = ExperimentConfig {
        algorithm: Algorithm::Dfca,
        init_mode: InitMode::Global,
        ..davg.clone()
    };
    let (a, b) = (experiment::run_experiment(&davg).unwrap(), experiment::run_experiment(&dfca).unwrap());
    assert_eq!(metrics::trace_csv(&a, 1), metrics::trace_csv(&b, 1));
}

#[test]
fn single_model_baseline_holds_one_model_on_clustered_data() {
    let cfg = small(Algorithm::Davg);
    assert_eq!(cfg.k, 2);
    let e = Experiment::build(&cfg).unwrap();
    assert!(e.states.iter().all(|s| s.k() == 1));
    let trace = e.run().unwrap();
    assert_eq!(trace[0].f_cluster.len(), 1);
    assert!(trace.iter().all(|m| m.clustering_accuracy == 0.5));
}

#[test]
fn zero_model_is_near_chance() {
    let cfg = ExperimentConfig::default();
    let e = Experiment::build(&cfg).unwrap();
    let zero = MlpModel::zeros(cfg.model_shape(cfg.data.dim));
    for d in &e.eval.test_sets {
        assert!(zero.accuracy(d) <= 1.0 / cfg.data.n_classes as f64 + 0.1 + 0.15);
    }
    let pooled: f64 = e.eval.test_sets.iter().map(|d| zero.accuracy(d) * d.len() as f64).sum::<f64>()
        / e.eval.test_sets.iter().map(|d| d.len()).sum::<usize>() as f64;
    assert!(pooled <= 1.0 / cfg.data.n_classes as f64 + 0.1, "{pooled}");
}

#[test]
fn disconnected_topology_aborts_when_asked() {
    let cfg = ExperimentConfig {
        topology_p: 0.0,
        on_disconnected: OnDisconnected::Abort,
        ..small(Algorithm::Dfca)
    };
    assert!(matches!(Experiment::build(&cfg), Err(Error::Disconnected { .. })));
    let proceed = ExperimentConfig {
        on_disconnected: OnDisconnected::Proceed,
        ..cfg
    };
    // Isolated clients never receive, so each trains alone.
    let trace = experiment::run_experiment(&proceed).unwrap();
    assert_eq!(trace.len(), proceed.rounds);
}

#[test]
fn partial_participation_trains_only_participants() {
    let cfg = ExperimentConfig {
        participation_fraction: 0.5,
        non_participants_receive: false,
        ..small(Algorithm::Dfca)
    };
    let mut e = Experiment::build(&cfg).unwrap();
    let plan = e.plan(0);
    assert_eq!(plan.participants.len(), 4);
    let before: Vec<_> = e.states.iter().map(|s| s.models.clone()).collect();
    core::run_round(&mut e.states, &e.topology, &plan, &cfg.hyperparams(), &e.eval).unwrap();
    for (i, s) in e.states.iter().enumerate() {
        if !plan.participants.contains(&i) {
            assert_eq!(s.models, before[i], "client {i} sat out but changed");
        }
    }
}

#[test]
fn round_rejects_topology_of_wrong_size() {
    let mut e = Experiment::build(&small(Algorithm::Dfca)).unwrap();
    let plan = RoundPlan::full(8, 0, 0, AggregationMode::Batch);
    let wrong = Topology::complete(5);
    let r = core::run_round(&mut e.states, &wrong, &plan, &Hyperparams::default(), &Evaluation::default());
    assert!(r.is_err());
}

fn idx_images(count: usize, side: usize, seed: u8) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803u32, count as u32, side as u32, side as u32] {
        b.extend(v.to_be_bytes());
    }
    b.extend((0..count * side * side).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)));
    b
}

fn idx_labels(count: usize) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0801u32, count as u32] {
        b.extend(v.to_be_bytes());
    }
    b.extend((0..count).map(|i| (i % 3) as u8));
    b
}

#[test]
fn idx_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    std::fs::write(&images, idx_images(120, 4, 5)).unwrap();
    std::fs::write(&labels, idx_labels(120)).unwrap();
    let text = format!(
        "n_clients = 6\nk = 2\nT = 3\nmodel.hidden = 4\ndata.source = idx\n\
         data.idx_images = {}\ndata.idx_labels = {}\ndata.dim = 16\ndata.n_classes = 3\n\
         data.samples_per_client = 20\n",
        images.display(),
        labels.display()
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    assert!(matches!(cfg.data_source, DataSource::Idx { .. }));
    let data = experiment::build_client_data(&cfg).unwrap();
    assert_eq!(data.train.len(), 6);
    // Clients in cluster 1 see their images turned by 180 degrees.
    assert_eq!(data.train[1].distribution_id, 1);
    let trace = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(trace.len(), 3);

    let too_many = ExperimentConfig {
        n_clients: 7,
        ..cfg
    };
    assert!(experiment::build_client_data(&too_many).is_err());
}

#[test]
fn edge_list_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("graph.txt");
    let t = dfca::topology::generate_erdos_renyi(15, 0.3, 8).unwrap();
    t.write_edge_list(&path).unwrap();
    assert_eq!(Topology::read_edge_list(&path).unwrap(), t);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("15\n"));
    for line in text.lines().skip(1) {
        let (i, m) = line.split_once(' ').unwrap();
        assert!(i.parse::<usize>().unwrap() < m.parse::<usize>().unwrap());
    }
}
