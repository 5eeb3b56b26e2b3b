//! Builds an experiment from a config and runs its rounds.

use crate::baselines::{self, CentralServerState};
use crate::config::{Algorithm, DataSource, ExperimentConfig, OnDisconnected};
use crate::datagen::{self, Dataset};
use crate::dfca::{self, ClientState, InitMode, RoundPlan};
use crate::error::{Error, Result};
use crate::metrics::{Evaluation, RoundMetrics};
use crate::seed::{self, Stream};
use crate::topology::{self, Topology};

/// Per-client train/test splits and ground-truth clusters.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
    pub truth: Vec<usize>,
}

/// Client `i` draws from distribution `i mod k`.
pub fn build_client_data(cfg: &ExperimentConfig) -> Result<ClientData> {
    let master = cfg.seed;
    let truth: Vec<usize> = (0..cfg.n_clients).map(|i| i % cfg.k).collect();
    let full: Vec<Dataset> = match &cfg.data_source {
        DataSource::Synthetic => {
            let mut spec = cfg.data;
            spec.center_seed = cfg
                .data_center_seed
                .unwrap_or_else(|| seed::derive(master, Stream::DataCenters, &[]));
            truth
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    let s = seed::derive(master, Stream::DataSamples, &[i as u64]);
                    datagen::generate_rotated_synthetic(&spec, cfg.k, j, s)
                })
                .collect::<Result<_>>()?
        }
        DataSource::Idx { images, labels } => {
            let pool = datagen::load_idx_pair(images, labels)?;
            idx_client_data(cfg, &pool, &truth)?
        }
    };
    let mut train = Vec::with_capacity(full.len());
    let mut test = Vec::with_capacity(full.len());
    for (i, d) in full.iter().enumerate() {
        let s = seed::derive(master, Stream::Split, &[i as u64]);
        let (tr, te) = datagen::train_test_split(d, cfg.test_fraction, s)?;
        train.push(tr);
        test.push(te);
    }
    Ok(ClientData { train, test, truth })
}

/// Deals disjoint chunks of a shuffled image pool to clients and rotates each
/// client's images by its cluster's angle.
fn idx_client_data(cfg: &ExperimentConfig, pool: &Dataset, truth: &[usize]) -> Result<Vec<Dataset>> {
    use rand::seq::SliceRandom;

    if pool.dim() != cfg.data.dim {
        return Err(Error::invalid(
            "data.dim",
            format!("IDX images have {} pixels, config says {}", pool.dim(), cfg.data.dim),
        ));
    }
    if pool.n_classes_seen() > cfg.data.n_classes {
        return Err(Error::invalid(
            "data.n_classes",
            format!("IDX labels reach {}", pool.n_classes_seen() - 1),
        ));
    }
    let per = cfg.data.samples_per_client;
    if per * cfg.n_clients > pool.len() {
        return Err(Error::invalid(
            "data.samples_per_client",
            format!("{} clients x {per} samples exceed the {} available", cfg.n_clients, pool.len()),
        ));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(cfg.seed, Stream::DataSamples, &[])));
    truth
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let chunk = pool.select(&order[i * per..(i + 1) * per])?;
            let degrees = datagen::cluster_rotation_degrees(cfg.k, j);
            let mut features = Vec::with_capacity(chunk.features().len());
            for s in 0..chunk.len() {
                features.extend(datagen::rotate_image(chunk.sample(s), degrees)?);
            }
            Dataset::new(chunk.dim(), features, chunk.labels().to_vec(), j)
        })
        .collect()
}

pub fn build_topology(cfg: &ExperimentConfig) -> Result<Topology> {
    let s = cfg
        .topology_seed
        .unwrap_or_else(|| seed::derive(cfg.seed, Stream::Topology, &[]));
    let t = topology::generate_erdos_renyi(cfg.n_clients, cfg.topology_p, s)?;
    if !t.is_connected() {
        match cfg.on_disconnected {
            OnDisconnected::Abort => {
                return Err(Error::Disconnected {
                    n_clients: cfg.n_clients,
                    p: cfg.topology_p,
                })
            }
            OnDisconnected::Proceed => log::warn!(
                "{}: topology with n = {}, p = {} is disconnected; proceeding",
                cfg.name,
                cfg.n_clients,
                cfg.topology_p
            ),
        }
    }
    Ok(t)
}

/// A fully built experiment, advanced one round at a time.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub topology: Topology,
    pub states: Vec<ClientState>,
    pub eval: Evaluation,
    pub server: Option<CentralServerState>,
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let topology = build_topology(config)?;
        let data = build_client_data(config)?;
        let shape = config.model_shape(data.train[0].dim());
        let init_seed = seed::derive(config.seed, Stream::Init, &[]);
        let (mode, server) = match config.algorithm {
            Algorithm::Dfca => (config.init_mode, false),
            // IFCA starts every client from the server's models; the
            // single-model baseline starts from one shared model.
            Algorithm::Ifca => (InitMode::Global, true),
            Algorithm::Davg => (InitMode::Global, false),
        };
        let states = dfca::initialize(config.model_count(), mode, shape, data.train, init_seed)?;
        let server = if server {
            Some(CentralServerState::new(states[0].models.clone())?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            topology,
            states,
            eval: Evaluation {
                truth: data.truth,
                test_sets: data.test,
            },
            server,
        })
    }

    pub fn plan(&self, round: usize) -> RoundPlan {
        let cfg = &self.config;
        let n = cfg.n_clients;
        let mut plan = RoundPlan::full(n, round, cfg.seed, cfg.aggregation_mode);
        plan.participants = RoundPlan::sample_participants(n, cfg.participation_fraction, cfg.seed, round);
        plan.mixing = cfg.mixing_kind;
        plan.non_participants_receive = cfg.non_participants_receive;
        plan
    }

    pub fn step(&mut self, round: usize) -> Result<RoundMetrics> {
        let plan = self.plan(round);
        let hp = self.config.hyperparams();
        match self.config.algorithm {
            Algorithm::Dfca => dfca::run_round(&mut self.states, &self.topology, &plan, &hp, &self.eval),
            Algorithm::Davg => {
                baselines::decentralized_avg_round(&mut self.states, &self.topology, &plan, &hp, &self.eval)
            }
            Algorithm::Ifca => {
                let server = self.server.as_mut().expect("IFCA experiment has a server");
                baselines::ifca_round(server, &mut self.states, &hp, &plan, &self.eval)
            }
        }
    }

    pub fn run(mut self) -> Result<Vec<RoundMetrics>> {
        (0..self.config.rounds).map(|t| self.step(t)).collect()
    }
}

/// Builds topology, data and client states from `config`, runs `T` rounds and
/// returns the metric trace. Deterministic per config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    Experiment::build(config)?.run()
}
