//! Comparison algorithms: centralized IFCA and single-model decentralized
//! averaging.

use rayon::prelude::*;

use crate::dfca::{self, ClientState, Hyperparams, RoundPlan};
use crate::error::{Error, Result};
use crate::metrics::{self, Evaluation, RoundMetrics};
use crate::model::FlatParams;
use crate::topology::Topology;

/// Global per-cluster models kept by the IFCA server.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralServerState {
    pub models: Vec<FlatParams>,
}

impl CentralServerState {
    pub fn new(models: Vec<FlatParams>) -> Result<Self> {
        let len = models.first().map(FlatParams::len).ok_or_else(|| {
            Error::InvalidArgument("server needs at least one cluster model".into())
        })?;
        if let Some(bad) = models.iter().find(|m| m.len() != len) {
            return Err(Error::DimensionMismatch {
                expected: len,
                actual: bad.len(),
            });
        }
        Ok(Self { models })
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }
}

/// One IFCA round with full participation. Every client receives all `k`
/// server models, picks the one with the lowest training loss and trains it;
/// the server replaces each cluster model by the unweighted mean of the models
/// returned for it, or keeps it when nobody picked that cluster.
///
/// Clients' model copies are left equal to the new server models, so the
/// metrics describe what the server would deploy.
pub fn ifca_round(
    server: &mut CentralServerState,
    clients: &mut [ClientState],
    hp: &Hyperparams,
    plan: &RoundPlan,
    eval: &Evaluation,
) -> Result<RoundMetrics> {
    let changed: Vec<bool> = clients
        .par_iter_mut()
        .map(|c| -> Result<bool> {
            c.models.clone_from(&server.models);
            let before = c.assignment;
            let after = c.assign_cluster()?;
            c.local_update(hp, plan.shuffle_seed(c.client_id))?;
            Ok(before != after)
        })
        .collect::<Result<_>>()?;

    let before = server.models.clone();
    for (j, model) in server.models.iter_mut().enumerate() {
        let returned: Vec<&FlatParams> = clients
            .iter()
            .filter_map(|c| match &c.outbox {
                Some((cj, p)) if *cj == j => Some(p),
                _ => None,
            })
            .collect();
        if returned.is_empty() {
            continue;
        }
        *model = metrics::mean_of(&returned);
    }
    for c in clients.iter_mut() {
        c.models.clone_from(&server.models);
    }

    let mut m = metrics::evaluate(clients, eval, plan.round)?;
    m.avg_drift = before
        .iter()
        .zip(&server.models)
        .map(|(b, a)| b.squared_distance(a).sqrt())
        .collect();
    m.assignments_changed = changed.iter().filter(|&&c| c).count();
    Ok(m)
}

/// Plain decentralized averaging: a DFCA round where every client holds a
/// single model.
pub fn decentralized_avg_round(
    states: &mut [ClientState],
    t: &Topology,
    plan: &RoundPlan,
    hp: &Hyperparams,
    eval: &Evaluation,
) -> Result<RoundMetrics> {
    if let Some(s) = states.iter().find(|s| s.k() != 1) {
        return Err(Error::InvalidArgument(format!(
            "decentralized averaging expects one model per client, client {} holds {}",
            s.client_id,
            s.k()
        )));
    }
    dfca::run_round(states, t, plan, hp, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Dataset;
    use crate::dfca::AggregationMode;
    use crate::model::{MlpModel, ModelShape};

    fn data(label: usize, x: f64) -> Dataset {
        Dataset::from_rows(&[vec![x, 1.0], vec![x, -1.0]], vec![label, label], 0).unwrap()
    }

    fn setup(k: usize) -> (CentralServerState, Vec<ClientState>, ModelShape) {
        let shape = ModelShape::new(2, 0, 2);
        let models: Vec<FlatParams> = (0..k)
            .map(|j| MlpModel::init_uniform(shape, 40 + j as u64).into_flat())
            .collect();
        let server = CentralServerState::new(models.clone()).unwrap();
        let clients = vec![
            ClientState::new(0, shape, models.clone(), data(0, 3.0)).unwrap(),
            ClientState::new(1, shape, models.clone(), data(1, -3.0)).unwrap(),
        ];
        (server, clients, shape)
    }

    #[test]
    fn mean_of_one_and_untouched_cluster() {
        let (mut server, mut clients, _) = setup(3);
        let hp = Hyperparams {
            gamma: 0.5,
            tau: 2,
            batch_size: 2,
        };
        let plan = RoundPlan::full(2, 0, 1, AggregationMode::Batch);
        let before = server.clone();
        ifca_round(&mut server, &mut clients, &hp, &plan, &Evaluation::default()).unwrap();

        let mut picked = [false; 3];
        for c in &clients {
            let (j, p) = c.outbox.as_ref().unwrap();
            picked[*j] = true;
            if clients.iter().filter(|o| o.assignment == *j).count() == 1 {
                assert_eq!(&server.models[*j], p);
            }
        }
        for (j, &hit) in picked.iter().enumerate() {
            if !hit {
                assert_eq!(server.models[j], before.models[j]);
            }
        }
        assert!(picked.iter().any(|p| !p));
    }

    #[test]
    fn davg_requires_single_model() {
        let (_, mut clients, _) = setup(2);
        let t = Topology::complete(2);
        let plan = RoundPlan::full(2, 0, 1, AggregationMode::Batch);
        let err = decentralized_avg_round(&mut clients, &t, &plan, &Hyperparams::default(), &Evaluation::default());
        assert!(err.is_err());
    }
}
