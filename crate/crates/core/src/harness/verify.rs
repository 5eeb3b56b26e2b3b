//! Executable invariant suite: small randomized instances of every property
//! the algorithm relies on, each reported as pass/fail.

use std::collections::BTreeMap;
use std::time::Instant;

use itertools::Itertools;
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::datagen::{self, Dataset, SyntheticSpec};
use crate::dfca::{self, AggregationMode, ArrivalOrder, ClientState, Fault, Hyperparams, InitMode, RoundPlan};
use crate::experiment;
use crate::metrics::{self, Evaluation};
use crate::model::{FlatParams, MlpModel, ModelShape};
use crate::seed;
use crate::topology::{self, MixingKind, MixingMatrix, Topology};

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    #[doc(hidden)]
    pub fault: Fault,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&VerifyOptions) -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("sequential aggregation equals batch aggregation", sequential_equals_batch),
    ("assignment never increases the global loss", assignment_descent),
    ("metropolis gossip preserves the network average", average_preservation),
    ("metropolis gossip contracts disagreement by lambda^2", consensus_contraction),
    ("global initialization starts with zero dispersion", gi_zero_dispersion),
    ("local update touches only the assigned model", local_update_isolation),
    ("backprop matches central finite differences", gradient_check),
    ("global loss decomposes into cluster losses", loss_decomposition),
    ("spectral gap is positive iff the graph is connected", spectral_gap_connectivity),
    ("experiments are bitwise reproducible", determinism),
];

/// Runs every property and returns one result per property, in a fixed order.
pub fn verify(opts: &VerifyOptions) -> Vec<PropertyResult> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let outcome = check(opts);
            let seconds = start.elapsed().as_secs_f64();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            PropertyResult {
                name,
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

fn dummy_data(dim: usize) -> Dataset {
    Dataset::new(dim, vec![0.0; dim], vec![0], 0).expect("one-sample dataset")
}

/// States with random `len`-dimensional parameters for every cluster, random
/// assignments, and outboxes populated as after local training.
fn random_states(n: usize, k: usize, len: usize, rng: &mut impl Rng) -> Vec<ClientState> {
    let shape = ModelShape::new(len - 1, 0, 1);
    (0..n)
        .map(|i| {
            let models = (0..k)
                .map(|_| FlatParams((0..len).map(|_| rng.random_range(-5.0..5.0)).collect()))
                .collect();
            let mut s = ClientState::new(i, shape, models, dummy_data(len - 1)).expect("valid state");
            s.assignment = rng.random_range(0..k);
            s.outbox = Some((s.assignment, s.models[s.assignment].clone()));
            s
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sequential_equals_batch(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = seed::rng(101);
    let mut compared = 0usize;
    let mut worst = 0.0f64;
    for trial in 0..12u64 {
        let n = 3 + (trial as usize % 4);
        let k = 1 + (trial as usize % 3);
        let t = topology::generate_erdos_renyi(n, 0.7, trial).map_err(|e| e.to_string())?;
        let states = random_states(n, k, 3, &mut rng);
        let mut batch = states.clone();
        let plan = RoundPlan::full(n, 0, trial, AggregationMode::Batch);
        dfca::aggregate_batch(&mut batch, &t, &plan);
        for i in 0..n {
            for j in 0..k {
                let senders: Vec<usize> = t
                    .neighbors(i)
                    .iter()
                    .copied()
                    .filter(|&m| states[m].assignment == j)
                    .collect();
                if senders.len() > 5 {
                    continue;
                }
                for perm in senders.iter().copied().permutations(senders.len()) {
                    let mut seq = states.clone();
                    let mut p = RoundPlan::full(n, 0, trial, AggregationMode::Sequential);
                    p.arrival = ArrivalOrder::Explicit(BTreeMap::from([((i, j), perm)]));
                    p.fault = opts.fault;
                    dfca::aggregate_sequential(&mut seq, &t, &p);
                    let d = max_abs_diff(&seq[i].models[j].0, &batch[i].models[j].0);
                    worst = worst.max(d);
                    compared += 1;
                    if d > 1e-9 {
                        return Err(format!("receiver {i}, cluster {j}: deviation {d:e}"));
                    }
                }
            }
        }
    }
    Ok(format!("{compared} arrival orders, max deviation {worst:.1e}"))
}

fn small_spec(samples: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: 3,
        dim: 4,
        samples_per_client: samples,
        class_separation: 2.0,
        noise_std: 1.0,
        center_seed: 5,
        rotation_planes: None,
    }
}

fn synthetic_clients(n: usize, k: usize, samples: usize, seed: u64) -> Vec<Dataset> {
    (0..n)
        .map(|i| {
            datagen::generate_rotated_synthetic(&small_spec(samples), k, i % k, seed + i as u64)
                .expect("valid synthetic spec")
        })
        .collect()
}

fn assignment_descent(_: &VerifyOptions) -> Result<String, String> {
    let shape = ModelShape::new(4, 3, 3);
    let mut rng = seed::rng(202);
    for trial in 0..20u64 {
        let k = [2, 4][trial as usize % 2];
        let data = synthetic_clients(6, k, 12, trial * 10);
        let mut states = dfca::initialize(k, InitMode::Local, shape, data, trial).map_err(|e| e.to_string())?;
        for s in &mut states {
            s.assignment = rng.random_range(0..k);
        }
        let before = metrics::f_global(&states).map_err(|e| e.to_string())?;
        for s in &mut states {
            s.assign_cluster().map_err(|e| e.to_string())?;
        }
        let after = metrics::f_global(&states).map_err(|e| e.to_string())?;
        if after > before + 1e-12 {
            return Err(format!("trial {trial}: {before} -> {after}"));
        }
    }
    Ok("20 randomized states".into())
}

type RoundDisp = (f64, f64, f64);

/// Single-cluster, metropolis, gamma = 0 rounds on a connected ER graph.
/// Returns `(lambda, per-round (disp_before, disp_after, mean drift))`.
fn consensus_rounds(n: usize, p: f64, graph_seed: u64, rounds: usize) -> Result<(f64, Vec<RoundDisp>), String> {
    let mut s = graph_seed;
    let t = loop {
        let t = topology::generate_erdos_renyi(n, p, s).map_err(|e| e.to_string())?;
        if t.is_connected() {
            break t;
        }
        s += 1000;
    };
    let lambda = MixingMatrix::new(&t, MixingKind::Metropolis)
        .second_eigenvalue_magnitude()
        .map_err(|e| e.to_string())?;
    let shape = ModelShape::new(4, 0, 3);
    let data = synthetic_clients(n, 1, 8, graph_seed);
    let mut states = dfca::initialize(1, InitMode::Local, shape, data, graph_seed).map_err(|e| e.to_string())?;
    let hp = Hyperparams {
        gamma: 0.0,
        tau: 1,
        batch_size: 8,
    };
    let mut out = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let mut plan = RoundPlan::full(n, r, graph_seed, AggregationMode::Sequential);
        plan.mixing = MixingKind::Metropolis;
        let before = metrics::dispersion(&states, 0);
        let m = dfca::run_round(&mut states, &t, &plan, &hp, &Evaluation::default()).map_err(|e| e.to_string())?;
        out.push((before, m.disp[0], m.avg_drift[0]));
    }
    Ok((lambda, out))
}

fn average_preservation(_: &VerifyOptions) -> Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let (_, rounds) = consensus_rounds(10, 0.4, seed, 10)?;
        for (r, &(_, _, drift)) in rounds.iter().enumerate() {
            worst = worst.max(drift);
            if drift > 1e-9 {
                return Err(format!("graph {seed}, round {r}: average moved by {drift:e}"));
            }
        }
    }
    Ok(format!("max drift {worst:.1e}"))
}

fn consensus_contraction(_: &VerifyOptions) -> Result<String, String> {
    for seed in 0..3 {
        let (lambda, rounds) = consensus_rounds(10, 0.4, seed, 10)?;
        for (r, &(before, after, _)) in rounds.iter().enumerate() {
            if after > lambda * lambda * before + 1e-9 {
                return Err(format!(
                    "graph {seed}, round {r}: {after:e} > lambda^2 * {before:e} (lambda = {lambda})"
                ));
            }
        }
    }
    Ok("3 graphs x 10 rounds".into())
}

fn gi_zero_dispersion(_: &VerifyOptions) -> Result<String, String> {
    let shape = ModelShape::new(4, 3, 3);
    for k in [1, 2, 4] {
        let states = dfca::initialize(k, InitMode::Global, shape, synthetic_clients(5, k, 6, 3), 77)
            .map_err(|e| e.to_string())?;
        for j in 0..k {
            let d = metrics::dispersion(&states, j);
            if d != 0.0 {
                return Err(format!("k = {k}, cluster {j}: dispersion {d:e}"));
            }
        }
    }
    Ok("k in {1, 2, 4}".into())
}

fn local_update_isolation(_: &VerifyOptions) -> Result<String, String> {
    let shape = ModelShape::new(4, 3, 3);
    let mut states = dfca::initialize(3, InitMode::Local, shape, synthetic_clients(4, 2, 10, 8), 9)
        .map_err(|e| e.to_string())?;
    for s in &mut states {
        let before = s.models.clone();
        s.local_update(&Hyperparams::default(), 4).map_err(|e| e.to_string())?;
        for j in (0..3).filter(|&j| j != s.assignment) {
            if s.models[j] != before[j] {
                return Err(format!("client {}: cluster {j} changed", s.client_id));
            }
        }
        if s.models[s.assignment] == before[s.assignment] {
            return Err(format!("client {}: assigned model did not train", s.client_id));
        }
    }
    Ok("4 clients".into())
}

fn gradient_check(_: &VerifyOptions) -> Result<String, String> {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    for (s, shape) in [ModelShape::new(3, 4, 3), ModelShape::new(2, 0, 2), ModelShape::new(4, 2, 4)]
        .into_iter()
        .enumerate()
    {
        let spec = SyntheticSpec {
            n_classes: shape.n_classes,
            dim: shape.input_dim,
            ..small_spec(5)
        };
        let d = datagen::generate_rotated_synthetic(&spec, 1, 0, s as u64).map_err(|e| e.to_string())?;
        let m = MlpModel::init_uniform(shape, 30 + s as u64);
        let g = m.gradient(&d).map_err(|e| e.to_string())?;
        for p in 0..shape.param_count() {
            let mut plus = m.flatten();
            plus.0[p] += H;
            let mut minus = m.flatten();
            minus.0[p] -= H;
            let loss = |v: FlatParams| MlpModel::unflatten(shape, v).and_then(|m| m.forward_loss(&d));
            let fd = (loss(plus).map_err(|e| e.to_string())? - loss(minus).map_err(|e| e.to_string())?) / (2.0 * H);
            let rel = (g.0[p] - fd).abs() / fd.abs().max(g.0[p].abs()).max(1e-2);
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!("model {s}, parameter {p}: backprop {} vs fd {fd}", g.0[p]));
            }
        }
    }
    Ok(format!("3 models, max relative error {worst:.1e}"))
}

fn loss_decomposition(_: &VerifyOptions) -> Result<String, String> {
    let shape = ModelShape::new(4, 3, 3);
    let states = dfca::initialize(4, InitMode::Local, shape, synthetic_clients(8, 4, 10, 1), 2)
        .map_err(|e| e.to_string())?;
    let m = metrics::evaluate(&states, &Evaluation::default(), 0).map_err(|e| e.to_string())?;
    let sum: f64 = m.f_cluster.iter().sum();
    if (m.f_global - sum).abs() > 1e-9 {
        return Err(format!("f_global {} vs sum {sum}", m.f_global));
    }
    Ok(format!("f_global = {:.6}", m.f_global))
}

fn spectral_gap_connectivity(_: &VerifyOptions) -> Result<String, String> {
    let mut connected = 0;
    for seed in 0..20 {
        let t = topology::generate_erdos_renyi(12, 0.2, seed).map_err(|e| e.to_string())?;
        let gap = MixingMatrix::new(&t, MixingKind::Metropolis)
            .spectral_gap()
            .map_err(|e| e.to_string())?;
        if t.is_connected() {
            connected += 1;
            if gap <= 0.0 {
                return Err(format!("graph {seed} connected but gap {gap}"));
            }
        } else if gap.abs() > 1e-8 {
            return Err(format!("graph {seed} disconnected but gap {gap}"));
        }
    }
    let split = Topology::from_edges(4, &[(0, 1), (2, 3)]).map_err(|e| e.to_string())?;
    let gap = MixingMatrix::new(&split, MixingKind::Metropolis)
        .spectral_gap()
        .map_err(|e| e.to_string())?;
    if gap.abs() > 1e-8 {
        return Err(format!("two components but gap {gap}"));
    }
    Ok(format!("{connected}/20 sampled graphs connected"))
}

fn determinism(_: &VerifyOptions) -> Result<String, String> {
    let cfg = ExperimentConfig {
        n_clients: 6,
        rounds: 3,
        hidden: 4,
        data: SyntheticSpec {
            samples_per_client: 20,
            ..SyntheticSpec::default()
        },
        ..ExperimentConfig::default()
    };
    let a = experiment::run_experiment(&cfg).map_err(|e| e.to_string())?;
    let b = experiment::run_experiment(&cfg).map_err(|e| e.to_string())?;
    let (ca, cb) = (metrics::trace_csv(&a, cfg.k), metrics::trace_csv(&b, cfg.k));
    if ca != cb {
        return Err("traces differ".into());
    }
    Ok(format!("{} bytes of identical trace", ca.len()))
}
