//! Client state and the three steps of a decentralized clustering round:
//! loss-based cluster assignment, local SGD on the assigned model, and
//! per-cluster aggregation of the models neighbors trained.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, Evaluation, RoundMetrics};
use crate::model::{FlatParams, MlpModel, ModelShape, SgdOptions};
use crate::seed::{self, Stream};
use crate::topology::{MixingKind, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Every client starts from the same `k` models, one shared seed per cluster.
    Global,
    /// Every client draws its own `k` models.
    Local,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gi" | "global" => Ok(Self::Global),
            "li" | "local" => Ok(Self::Local),
            _ => Err(format!("expected `gi` or `li`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Global => "gi",
            Self::Local => "li",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationMode {
    /// Synchronous mean over self and all same-cluster reporting neighbors.
    Batch,
    /// Running average, merging neighbor models one at a time in arrival order.
    Sequential,
}

impl std::str::FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "batch" => Ok(Self::Batch),
            "sequential" => Ok(Self::Sequential),
            _ => Err(format!("expected `batch` or `sequential`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::Sequential => "sequential",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub gamma: f64,
    pub tau: usize,
    pub batch_size: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            tau: 5,
            batch_size: 32,
        }
    }
}

/// Deliberate defects used to check that the verification suite detects them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Swaps the self and incoming weights of the running average.
    FlipRunningAverageWeights,
}

/// Order in which a receiver merges the models of its reporting neighbors.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalOrder {
    /// Seeded permutation per `(receiver, cluster, round)`.
    Seeded,
    /// Fixed orders keyed by `(receiver, cluster)`. Each must permute the
    /// reporting neighbor set; missing keys fall back to ascending order.
    Explicit(BTreeMap<(usize, usize), Vec<usize>>),
}

/// Everything that varies between rounds besides client state.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub round: usize,
    /// Root of the per-round shuffle and arrival streams.
    pub seed: u64,
    /// Sorted participating clients `M_t`.
    pub participants: Vec<usize>,
    pub arrival: ArrivalOrder,
    pub aggregation: AggregationMode,
    pub mixing: MixingKind,
    /// When false, only participants merge incoming models.
    pub non_participants_receive: bool,
    #[doc(hidden)]
    pub fault: Fault,
}

impl RoundPlan {
    /// Full participation, seeded arrival, paper-uniform weights.
    pub fn full(n_clients: usize, round: usize, seed: u64, aggregation: AggregationMode) -> Self {
        Self {
            round,
            seed,
            participants: (0..n_clients).collect(),
            arrival: ArrivalOrder::Seeded,
            aggregation,
            mixing: MixingKind::PaperUniform,
            non_participants_receive: true,
            fault: Fault::None,
        }
    }

    /// Samples `M_t`: `max(1, round(fraction * n))` clients, seeded per round.
    pub fn sample_participants(n_clients: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
        if fraction >= 1.0 {
            return (0..n_clients).collect();
        }
        let count = ((fraction * n_clients as f64).round() as usize).clamp(1, n_clients);
        let mut all: Vec<usize> = (0..n_clients).collect();
        let mut rng = seed::rng(seed::derive(seed, Stream::Participation, &[round as u64]));
        all.shuffle(&mut rng);
        let mut chosen = all[..count].to_vec();
        chosen.sort_unstable();
        chosen
    }

    fn participant_mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &i in &self.participants {
            mask[i] = true;
        }
        mask
    }

    fn is_receiver(&self, mask: &[bool], i: usize) -> bool {
        self.non_participants_receive || mask[i]
    }

    /// Arrival order for `(receiver, cluster)` over the given sorted senders.
    pub fn arrival_order(&self, receiver: usize, cluster: usize, senders: &[usize]) -> Vec<usize> {
        match &self.arrival {
            ArrivalOrder::Seeded => {
                let mut order = senders.to_vec();
                let s = seed::derive(
                    self.seed,
                    Stream::Arrival,
                    &[receiver as u64, cluster as u64, self.round as u64],
                );
                order.shuffle(&mut seed::rng(s));
                order
            }
            ArrivalOrder::Explicit(map) => match map.get(&(receiver, cluster)) {
                Some(order) => {
                    let mut sorted = order.clone();
                    sorted.sort_unstable();
                    assert_eq!(
                        sorted, senders,
                        "arrival order for ({receiver}, {cluster}) must permute the reporting neighbors"
                    );
                    order.clone()
                }
                None => senders.to_vec(),
            },
        }
    }

    pub fn shuffle_seed(&self, client: usize) -> u64 {
        seed::derive(self.seed, Stream::Shuffle, &[client as u64, self.round as u64])
    }
}

/// State held by one client: its copy of all `k` cluster models, its current
/// assignment, its training data, and the model it sends this round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub shape: ModelShape,
    pub models: Vec<FlatParams>,
    pub assignment: usize,
    pub data: Dataset,
    pub outbox: Option<(usize, FlatParams)>,
}

impl ClientState {
    pub fn new(client_id: usize, shape: ModelShape, models: Vec<FlatParams>, data: Dataset) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("a client needs at least one model".into()));
        }
        if let Some(bad) = models.iter().find(|m| m.len() != shape.param_count()) {
            return Err(Error::DimensionMismatch {
                expected: shape.param_count(),
                actual: bad.len(),
            });
        }
        Ok(Self {
            client_id,
            shape,
            models,
            assignment: 0,
            data,
            outbox: None,
        })
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn model(&self, j: usize) -> MlpModel {
        MlpModel::from_parts(self.shape, self.models[j].clone())
    }

    /// Training loss of cluster model `j` on this client's data.
    pub fn loss(&self, j: usize) -> Result<f64> {
        self.model(j).forward_loss(&self.data)
    }

    pub fn losses(&self) -> Result<Vec<f64>> {
        (0..self.k()).map(|j| self.loss(j)).collect()
    }

    /// Sets the assignment to the argmin of the per-cluster training losses,
    /// ties to the lowest index. Clusters with a non-finite loss are skipped;
    /// if none is finite the previous assignment stays.
    pub fn assign_cluster(&mut self) -> Result<usize> {
        let losses = self.losses()?;
        match argmin_finite(&losses) {
            Some(j) => self.assignment = j,
            None => log::warn!(
                "client {}: all cluster losses non-finite, keeping cluster {}",
                self.client_id,
                self.assignment
            ),
        }
        Ok(self.assignment)
    }

    /// Runs `tau` SGD epochs on the assigned model only, then queues it for
    /// sending.
    pub fn local_update(&mut self, hp: &Hyperparams, shuffle_seed: u64) -> Result<()> {
        let c = self.assignment;
        let opts = SgdOptions {
            gamma: hp.gamma,
            tau: hp.tau,
            batch_size: hp.batch_size,
            seed: shuffle_seed,
        };
        let trained = self.model(c).sgd_epochs(&self.data, &opts)?.into_flat();
        self.models[c] = trained.clone();
        self.outbox = Some((c, trained));
        Ok(())
    }
}

/// Index of the smallest finite value, ties to the lowest index.
pub fn argmin_finite(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < values[b]) {
            best = Some(j);
        }
    }
    best
}

/// Builds the initial client states, one per dataset, and computes each
/// client's initial assignment from its losses.
pub fn initialize(
    k: usize,
    mode: InitMode,
    shape: ModelShape,
    datasets: Vec<Dataset>,
    seed: u64,
) -> Result<Vec<ClientState>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let shared: Vec<FlatParams> = (0..k)
        .map(|j| {
            let s = seed::derive(seed, Stream::Init, &[0, j as u64]);
            MlpModel::init_uniform(shape, s).into_flat()
        })
        .collect();
    datasets
        .into_iter()
        .enumerate()
        .map(|(i, data)| {
            let models = match mode {
                InitMode::Global => shared.clone(),
                InitMode::Local => (0..k)
                    .map(|j| {
                        let s = seed::derive(seed, Stream::Init, &[1 + i as u64, j as u64]);
                        MlpModel::init_uniform(shape, s).into_flat()
                    })
                    .collect(),
            };
            let mut state = ClientState::new(i, shape, models, data)?;
            state.assign_cluster()?;
            Ok(state)
        })
        .collect()
}

/// Neighbors of `i` currently assigned to cluster `j`, sorted.
pub fn neighborhood_split(states: &[ClientState], t: &Topology, i: usize, j: usize) -> Vec<usize> {
    t.neighbors(i)
        .iter()
        .copied()
        .filter(|&m| states[m].assignment == j)
        .collect()
}

/// Neighbors of `i` whose outbox holds a model for cluster `j`, sorted.
fn reporting_neighbors(states: &[ClientState], t: &Topology, i: usize, j: usize) -> Vec<usize> {
    t.neighbors(i)
        .iter()
        .copied()
        .filter(|&m| matches!(&states[m].outbox, Some((c, _)) if *c == j))
        .collect()
}

fn outbox_params(state: &ClientState) -> &[f64] {
    &state.outbox.as_ref().expect("reporting neighbor has an outbox").1 .0
}

/// Synchronous aggregation. For every receiver `i` and cluster `j`, replaces
/// `theta_ij` by the mean of itself and the outbox models of its reporting
/// neighbors in `j` (paper-uniform), or by the Metropolis-weighted gossip
/// step restricted to those neighbors.
pub fn aggregate_batch(states: &mut [ClientState], t: &Topology, plan: &RoundPlan) {
    let updates = collect_updates(states, t, plan, |i, j, senders, states| {
        let own = &states[i].models[j].0;
        match plan.mixing {
            MixingKind::PaperUniform => {
                // own + sum(v - own) / (r + 1), exact when all inputs agree.
                let mut shift = vec![0.0; own.len()];
                for &m in senders {
                    for ((d, v), o) in shift.iter_mut().zip(outbox_params(&states[m])).zip(own) {
                        *d += v - o;
                    }
                }
                let scale = 1.0 / (senders.len() + 1) as f64;
                own.iter().zip(&shift).map(|(o, d)| o + d * scale).collect()
            }
            MixingKind::Metropolis => metropolis_step(states, t, i, j, senders),
        }
    });
    apply_updates(states, updates);
}

/// Running-average aggregation. Each receiver merges its reporting neighbors'
/// outbox models one at a time in the plan's arrival order; after `r` models
/// are in the average (itself included) the next one enters with weight
/// `1 / (r + 1)`.
pub fn aggregate_sequential(states: &mut [ClientState], t: &Topology, plan: &RoundPlan) {
    let updates = collect_updates(states, t, plan, |i, j, senders, states| {
        let order = plan.arrival_order(i, j, senders);
        match plan.mixing {
            MixingKind::PaperUniform => {
                let mut acc = states[i].models[j].0.clone();
                for (merged, &m) in order.iter().enumerate() {
                    // r/(r+1) a + 1/(r+1) v, written as a step towards v.
                    let r = (merged + 1) as f64;
                    let take = match plan.fault {
                        Fault::None => 1.0 / (r + 1.0),
                        Fault::FlipRunningAverageWeights => r / (r + 1.0),
                    };
                    for (a, v) in acc.iter_mut().zip(outbox_params(&states[m])) {
                        *a += take * (v - *a);
                    }
                }
                acc
            }
            MixingKind::Metropolis => metropolis_step(states, t, i, j, &order),
        }
    });
    apply_updates(states, updates);
}

/// `theta_ij + sum_m w_im (theta_mj - theta_ij)` over `senders` in the given
/// order, differences taken against the pre-round `theta_ij`.
fn metropolis_step(states: &[ClientState], t: &Topology, i: usize, j: usize, senders: &[usize]) -> Vec<f64> {
    let own = &states[i].models[j].0;
    let mut acc = own.clone();
    for &m in senders {
        let w = t.metropolis_weight(i, m);
        for ((a, v), o) in acc.iter_mut().zip(outbox_params(&states[m])).zip(own) {
            *a += w * (v - o);
        }
    }
    acc
}

type Update = (usize, usize, Vec<f64>);

/// Computes every receiver's new models from a frozen view of the states.
fn collect_updates<F>(states: &[ClientState], t: &Topology, plan: &RoundPlan, merge: F) -> Vec<Update>
where
    F: Fn(usize, usize, &[usize], &[ClientState]) -> Vec<f64>,
{
    let n = states.len();
    let mask = plan.participant_mask(n);
    let mut updates = Vec::new();
    for i in 0..n {
        if !plan.is_receiver(&mask, i) {
            continue;
        }
        for j in 0..states[i].k() {
            let senders = reporting_neighbors(states, t, i, j);
            if senders.is_empty() {
                continue;
            }
            updates.push((i, j, merge(i, j, &senders, states)));
        }
    }
    updates
}

fn apply_updates(states: &mut [ClientState], updates: Vec<Update>) {
    for (i, j, params) in updates {
        states[i].models[j] = FlatParams(params);
    }
}

/// One full round: participants assign and train, everybody (or only
/// participants) merges, then metrics are computed.
pub fn run_round(
    states: &mut [ClientState],
    t: &Topology,
    plan: &RoundPlan,
    hp: &Hyperparams,
    eval: &Evaluation,
) -> Result<RoundMetrics> {
    if states.len() != t.n_clients() {
        return Err(Error::DimensionMismatch {
            expected: t.n_clients(),
            actual: states.len(),
        });
    }
    let mask = plan.participant_mask(states.len());

    // Steps 1 and 2 touch only the client's own state.
    let changed: Vec<bool> = states
        .par_iter_mut()
        .map(|s| -> Result<bool> {
            s.outbox = None;
            if !mask[s.client_id] {
                return Ok(false);
            }
            let before = s.assignment;
            let after = s.assign_cluster()?;
            s.local_update(hp, plan.shuffle_seed(s.client_id))?;
            Ok(before != after)
        })
        .collect::<Result<_>>()?;

    let before = metrics::network_means(states);
    match plan.aggregation {
        AggregationMode::Batch => aggregate_batch(states, t, plan),
        AggregationMode::Sequential => aggregate_sequential(states, t, plan),
    }
    let after = metrics::network_means(states);
    let avg_drift = before
        .iter()
        .zip(&after)
        .map(|(b, a)| b.squared_distance(a).sqrt())
        .collect();

    let mut m = metrics::evaluate(states, eval, plan.round)?;
    m.avg_drift = avg_drift;
    m.assignments_changed = changed.iter().filter(|&&c| c).count();
    Ok(m)
}
