//! Per-client datasets drawn from `k` rotated copies of one distribution.

mod idx;

pub use idx::{
    load_idx_pair, parse_idx_images, parse_idx_labels, parse_idx_pair, IdxImages, IMAGES_MAGIC,
    LABELS_MAGIC,
};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Labeled samples held by one client. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    /// Index of the distribution (cluster) that generated these samples.
    pub distribution_id: usize,
}

impl Dataset {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        distribution_id: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset must not be empty".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * labels.len(),
                actual: features.len(),
            });
        }
        Ok(Self {
            dim,
            features,
            labels,
            distribution_id,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, distribution_id: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        Self::new(dim, rows.concat(), labels, distribution_id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn n_classes_seen(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Subset by sample indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.dim, features, labels, self.distribution_id)
    }
}

/// Shape of the synthetic rotated-Gaussian data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_client: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    /// Seed of the class centers, shared by every client.
    pub center_seed: u64,
    /// Number of leading coordinate pairs `(0,1), (2,3), ...` the cluster
    /// rotation acts on; `None` rotates every pair.
    pub rotation_planes: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            dim: 16,
            samples_per_client: 200,
            class_separation: 3.0,
            noise_std: 1.0,
            center_seed: 0,
            rotation_planes: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes > 0),
            ("dim", self.dim >= 2),
            ("samples_per_client", self.samples_per_client > 0),
            ("class_separation", self.class_separation > 0.0),
            ("noise_std", self.noise_std > 0.0),
            ("rotation_planes", self.rotation_planes != Some(0)),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::invalid(&format!("data.{name}"), "must be positive (dim >= 2)"));
            }
        }
        if self.rotation_planes.is_some_and(|p| p > self.dim / 2) {
            return Err(Error::invalid(
                "data.rotation_planes",
                format!("at most dim / 2 = {} planes fit", self.dim / 2),
            ));
        }
        Ok(())
    }

    /// Number of coordinate pairs rotated per sample.
    pub fn planes(&self) -> usize {
        self.rotation_planes.unwrap_or(self.dim / 2)
    }

    /// Class centers: standard normal directions scaled to `class_separation`.
    pub fn class_centers(&self) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(self.center_seed);
        (0..self.n_classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x * self.class_separation / norm).collect()
            })
            .collect()
    }
}

/// Rotation angle in degrees applied to cluster `cluster` out of `k`.
pub fn cluster_rotation_degrees(k: usize, cluster: usize) -> u32 {
    (cluster * 360 / k) as u32
}

fn rotate_plane(x: f64, y: f64, degrees: u32) -> (f64, f64) {
    match degrees % 360 {
        0 => (x, y),
        90 => (-y, x),
        180 => (-x, -y),
        270 => (y, -x),
        d => {
            let (s, c) = (d as f64).to_radians().sin_cos();
            (c * x - s * y, s * x + c * y)
        }
    }
}

/// Draws one client's dataset from distribution `client_cluster` of `k`.
///
/// The unrotated stream depends only on `(spec, seed)`: each sample picks a
/// class uniformly and adds isotropic noise to its center. Cluster `j` then
/// rotates the first two coordinates by `j * 360 / k` degrees.
pub fn generate_rotated_synthetic(
    spec: &SyntheticSpec,
    k: usize,
    client_cluster: usize,
    seed: u64,
) -> Result<Dataset> {
    if !matches!(k, 1 | 2 | 4) {
        return Err(Error::InvalidArgument(format!(
            "rotated synthetic data supports k in {{1, 2, 4}}, got {k}"
        )));
    }
    if client_cluster >= k {
        return Err(Error::InvalidArgument(format!(
            "cluster {client_cluster} out of range for k = {k}"
        )));
    }
    spec.validate()?;
    let centers = spec.class_centers();
    let degrees = cluster_rotation_degrees(k, client_cluster);
    let mut rng = seed::rng(seed);
    let n = spec.samples_per_client;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..spec.n_classes);
        let start = features.len();
        for &c in &centers[class] {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(c + spec.noise_std * noise);
        }
        for p in 0..spec.planes() {
            let (a, b) = (start + 2 * p, start + 2 * p + 1);
            (features[a], features[b]) = rotate_plane(features[a], features[b], degrees);
        }
        labels.push(class);
    }
    Dataset::new(spec.dim, features, labels, client_cluster)
}

/// Rotates a flattened row-major square image clockwise by a multiple of 90
/// degrees as an exact pixel permutation.
pub fn rotate_image(features: &[f64], degrees: u32) -> Result<Vec<f64>> {
    let side = (features.len() as f64).sqrt().round() as usize;
    if side * side != features.len() {
        return Err(Error::InvalidArgument(format!(
            "image length {} is not a perfect square",
            features.len()
        )));
    }
    let turns = match degrees {
        0 => 0,
        90 => 1,
        180 => 2,
        270 => 3,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "rotation must be 0, 90, 180 or 270 degrees, got {degrees}"
            )))
        }
    };
    let at = |r: usize, c: usize| features[r * side + c];
    let n = side.saturating_sub(1);
    let mut out = Vec::with_capacity(features.len());
    for r in 0..side {
        for c in 0..side {
            out.push(match turns {
                0 => at(r, c),
                1 => at(n - c, r),
                2 => at(n - r, n - c),
                _ => at(c, n - r),
            });
        }
    }
    Ok(out)
}

/// Seeded disjoint split into `(train, test)`. The test part gets
/// `round(len * test_fraction)` samples.
pub fn train_test_split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let n_test = (d.len() as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == d.len() {
        return Err(Error::InvalidArgument(format!(
            "split of {} samples at {test_fraction} leaves an empty side",
            d.len()
        )));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    let (test_idx, train_idx) = idx.split_at(n_test);
    Ok((d.select(train_idx)?, d.select(test_idx)?))
}
