//! Measured quantities: loss hierarchy, per-cluster dispersion, clustering
//! accuracy and test accuracy.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::dfca::ClientState;
use crate::error::{Error, Result};
use crate::model::FlatParams;

/// Ground truth and held-out data used to score a round.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    /// Generating distribution of each client's data.
    pub truth: Vec<usize>,
    /// Per-client test split. May be empty, in which case test accuracy is 0.
    pub test_sets: Vec<Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub f_global: f64,
    pub f_cluster: Vec<f64>,
    pub disp: Vec<f64>,
    pub clustering_accuracy: f64,
    /// Sample-weighted mean accuracy of each client's assigned model.
    pub test_accuracy: f64,
    /// Unweighted mean over clients of the same quantity.
    pub test_accuracy_client_mean: f64,
    /// Distance the network-average of each cluster model moved during
    /// aggregation.
    pub avg_drift: Vec<f64>,
    pub assignments_changed: usize,
}

impl RoundMetrics {
    pub fn k(&self) -> usize {
        self.f_cluster.len()
    }

    pub fn csv_header(k: usize) -> String {
        let mut cols = vec!["round".to_string(), "f_global".to_string()];
        cols.extend((0..k).map(|j| format!("f_cluster_{j}")));
        cols.extend((0..k).map(|j| format!("disp_{j}")));
        cols.push("clustering_acc".into());
        cols.push("test_acc".into());
        cols.extend((0..k).map(|j| format!("avg_drift_{j}")));
        cols.push("assignments_changed".into());
        cols.join(",")
    }

    /// One CSV row. Floats use Rust's shortest round-trip formatting.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.round.to_string(), self.f_global.to_string()];
        cols.extend(self.f_cluster.iter().map(f64::to_string));
        cols.extend(self.disp.iter().map(f64::to_string));
        cols.push(self.clustering_accuracy.to_string());
        cols.push(self.test_accuracy.to_string());
        cols.extend(self.avg_drift.iter().map(f64::to_string));
        cols.push(self.assignments_changed.to_string());
        cols.join(",")
    }
}

/// Renders a full trace as CSV with a header line.
pub fn trace_csv(trace: &[RoundMetrics], k: usize) -> String {
    let mut out = RoundMetrics::csv_header(k);
    out.push('\n');
    for m in trace {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

/// Assigned-model training loss of every client, in client order.
pub fn client_losses(states: &[ClientState]) -> Result<Vec<f64>> {
    states
        .par_iter()
        .map(|s| s.loss(s.assignment))
        .collect()
}

/// Sum of assigned-model training losses of the clients assigned to `j`.
pub fn f_cluster(states: &[ClientState], j: usize) -> Result<f64> {
    let losses = client_losses(states)?;
    let k = states.first().map_or(0, ClientState::k).max(j + 1);
    Ok(cluster_sums(states, &losses, k)[j])
}

fn cluster_sums(states: &[ClientState], losses: &[f64], k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; k];
    for (s, l) in states.iter().zip(losses) {
        sums[s.assignment] += l;
    }
    sums
}

/// Sum of all assigned-model training losses.
pub fn f_global(states: &[ClientState]) -> Result<f64> {
    Ok(client_losses(states)?.iter().sum())
}

/// Mean over clients of each cluster model.
pub fn network_means(states: &[ClientState]) -> Vec<FlatParams> {
    let Some(first) = states.first() else {
        return Vec::new();
    };
    (0..first.k())
        .map(|j| {
            let copies: Vec<&FlatParams> = states.iter().map(|s| &s.models[j]).collect();
            mean_of(&copies)
        })
        .collect()
}

/// Mean computed as `first + sum(x - first) / n`, which is exact when all
/// copies are bitwise equal.
pub fn mean_of(copies: &[&FlatParams]) -> FlatParams {
    let first = copies[0];
    let mut acc = vec![0.0; first.len()];
    for c in &copies[1..] {
        for ((a, v), f) in acc.iter_mut().zip(&c.0).zip(&first.0) {
            *a += v - f;
        }
    }
    let n = copies.len() as f64;
    FlatParams(acc.iter().zip(&first.0).map(|(a, f)| f + a / n).collect())
}

/// Mean squared distance of every client's copy of model `j` from the
/// network average of that model. All clients count, assigned or not.
pub fn dispersion(states: &[ClientState], j: usize) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let copies: Vec<&FlatParams> = states.iter().map(|s| &s.models[j]).collect();
    dispersion_of(&copies)
}

pub fn dispersion_of(copies: &[&FlatParams]) -> f64 {
    let mean = mean_of(copies);
    copies.iter().map(|c| c.squared_distance(&mean)).sum::<f64>() / copies.len() as f64
}

/// Best match rate between predicted and true cluster labels over all
/// relabelings of the predictions. Exact enumeration; label spaces of
/// different sizes are padded to the larger one.
pub fn clustering_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "one prediction per client");
    if predicted.is_empty() {
        return 1.0;
    }
    let labels = predicted.iter().chain(truth).max().map_or(1, |m| m + 1);
    let mut counts = vec![0usize; labels * labels];
    for (&p, &t) in predicted.iter().zip(truth) {
        counts[p * labels + t] += 1;
    }
    let best = (0..labels)
        .permutations(labels)
        .map(|perm| (0..labels).map(|p| counts[p * labels + perm[p]]).sum::<usize>())
        .max()
        .unwrap_or(0);
    best as f64 / predicted.len() as f64
}

/// Accuracy of each client's assigned model on its own test set:
/// `(sample-weighted mean, client mean)`.
pub fn test_accuracy(states: &[ClientState], test_sets: &[Dataset]) -> Result<(f64, f64)> {
    if test_sets.is_empty() {
        return Ok((0.0, 0.0));
    }
    if test_sets.len() != states.len() {
        return Err(Error::DimensionMismatch {
            expected: states.len(),
            actual: test_sets.len(),
        });
    }
    let per_client: Vec<(f64, usize)> = states
        .par_iter()
        .zip(test_sets)
        .map(|(s, d)| (s.model(s.assignment).accuracy(d), d.len()))
        .collect();
    Ok(weighted_accuracy(&per_client))
}

/// `(sample-weighted, client-mean)` accuracy from `(accuracy, n_samples)` pairs.
pub fn weighted_accuracy(per_client: &[(f64, usize)]) -> (f64, f64) {
    let total: usize = per_client.iter().map(|p| p.1).sum();
    let weighted = per_client.iter().map(|&(a, n)| a * n as f64).sum::<f64>() / total as f64;
    let mean = per_client.iter().map(|p| p.0).sum::<f64>() / per_client.len() as f64;
    (weighted, mean)
}

/// Everything except drift and assignment changes, which only the round
/// driver knows.
pub fn evaluate(states: &[ClientState], eval: &Evaluation, round: usize) -> Result<RoundMetrics> {
    let k = states.first().map_or(0, ClientState::k);
    let losses = client_losses(states)?;
    let f_cluster = cluster_sums(states, &losses, k);
    let f_global = losses.iter().sum();
    let disp = (0..k).map(|j| dispersion(states, j)).collect();
    let predicted: Vec<usize> = states.iter().map(|s| s.assignment).collect();
    let clustering_accuracy = if eval.truth.is_empty() {
        0.0
    } else {
        clustering_accuracy(&predicted, &eval.truth)
    };
    let (test_accuracy, test_accuracy_client_mean) = test_accuracy(states, &eval.test_sets)?;
    Ok(RoundMetrics {
        round,
        f_global,
        f_cluster,
        disp,
        clustering_accuracy,
        test_accuracy,
        test_accuracy_client_mean,
        avg_drift: vec![0.0; k],
        assignments_changed: 0,
    })
}

/// First round from which no assignment changes for the rest of the trace.
/// `None` if the last round still changed assignments.
pub fn stabilization_round(trace: &[RoundMetrics]) -> Option<usize> {
    match trace.iter().rposition(|m| m.assignments_changed > 0) {
        None => Some(trace.first().map_or(0, |m| m.round)),
        Some(last) if last + 1 < trace.len() => Some(trace[last + 1].round),
        Some(_) => None,
    }
}
