//! One-hidden-layer perceptron with softmax cross-entropy, trained by
//! minibatch SGD.
//!
//! Parameters live in a single flat vector laid out as
//! `w1 (hidden x d, row-major) | b1 (hidden) | w2 (C x hidden, row-major) | b2 (C)`.
//! With `hidden == 0` the hidden layer disappears and the model is plain
//! softmax regression: `w2 (C x d) | b2 (C)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl ModelShape {
    pub fn new(input_dim: usize, hidden: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            n_classes,
        }
    }

    /// Width of the layer feeding the output layer.
    fn penultimate(&self) -> usize {
        if self.hidden == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    fn first_layer_len(&self) -> usize {
        if self.hidden == 0 {
            0
        } else {
            self.hidden * self.input_dim + self.hidden
        }
    }

    pub fn param_count(&self) -> usize {
        self.first_layer_len() + self.n_classes * self.penultimate() + self.n_classes
    }
}

/// Canonical flat parameter vector. This is what clients exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn squared_distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `u64` little-endian length, then each value as a little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |needed| Error::Truncated {
            what: "flat params",
            needed,
            available: bytes.len(),
        };
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| truncated(8))?;
        let len = u64::from_le_bytes(header);
        let needed = usize::try_from(len)
            .ok()
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(8))
            .ok_or_else(|| truncated(usize::MAX))?;
        if bytes.len() < needed {
            return Err(truncated(needed));
        }
        if bytes.len() > needed {
            return Err(Error::InvalidArgument(format!(
                "flat params: {} trailing bytes",
                bytes.len() - needed
            )));
        }
        Ok(Self(
            bytes[8..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    shape: ModelShape,
    params: FlatParams,
}

impl MlpModel {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            params: FlatParams::zeros(shape.param_count()),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer, weights and
    /// biases alike.
    pub fn init_uniform(shape: ModelShape, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut values = Vec::with_capacity(shape.param_count());
        let mut layer = |fan_in: usize, count: usize, values: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            values.extend((0..count).map(|_| rng.random_range(-bound..=bound)));
        };
        if shape.hidden > 0 {
            layer(shape.input_dim, shape.first_layer_len(), &mut values);
        }
        let out_len = shape.n_classes * shape.penultimate() + shape.n_classes;
        layer(shape.penultimate(), out_len, &mut values);
        Self {
            shape,
            params: FlatParams(values),
        }
    }

    pub fn unflatten(shape: ModelShape, params: FlatParams) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::DimensionMismatch {
                expected: shape.param_count(),
                actual: params.len(),
            });
        }
        if params.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("model parameters must be finite".into()));
        }
        Ok(Self { shape, params })
    }

    /// Wraps parameters without the finiteness check, so diverged models can
    /// still be evaluated (to a non-finite loss).
    pub(crate) fn from_parts(shape: ModelShape, params: FlatParams) -> Self {
        debug_assert_eq!(params.len(), shape.param_count());
        Self { shape, params }
    }

    pub fn flatten(&self) -> FlatParams {
        self.params.clone()
    }

    pub fn into_flat(self) -> FlatParams {
        self.params
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn params(&self) -> &FlatParams {
        &self.params
    }

    pub fn w1(&self) -> &[f64] {
        &self.params.0[..self.shape.hidden * self.shape.input_dim]
    }

    pub fn b1(&self) -> &[f64] {
        let s = self.shape.hidden * self.shape.input_dim;
        &self.params.0[s..self.shape.first_layer_len()]
    }

    pub fn w2(&self) -> &[f64] {
        let s = self.shape.first_layer_len();
        &self.params.0[s..s + self.shape.n_classes * self.shape.penultimate()]
    }

    pub fn b2(&self) -> &[f64] {
        &self.params.0[self.shape.param_count() - self.shape.n_classes..]
    }

    fn check_data(&self, d: &Dataset) -> Result<()> {
        if d.dim() != self.shape.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.shape.input_dim,
                actual: d.dim(),
            });
        }
        if let Some(&bad) = d.labels().iter().find(|&&y| y >= self.shape.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.shape.n_classes
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over the whole dataset.
    pub fn forward_loss(&self, d: &Dataset) -> Result<f64> {
        self.check_data(d)?;
        let mut ws = Workspace::new(self.shape);
        let total: f64 = (0..d.len())
            .map(|i| ws.sample_loss(self.params.as_slice(), d.sample(i), d.label(i), None))
            .sum();
        Ok(total / d.len() as f64)
    }

    /// Gradient of the mean cross-entropy over the whole dataset.
    pub fn gradient(&self, batch: &Dataset) -> Result<FlatParams> {
        self.check_data(batch)?;
        let all: Vec<usize> = (0..batch.len()).collect();
        self.gradient_on(batch, &all)
    }

    /// Gradient of the mean cross-entropy over the samples `indices` of `d`.
    pub fn gradient_on(&self, d: &Dataset, indices: &[usize]) -> Result<FlatParams> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut grad = vec![0.0; self.shape.param_count()];
        let mut ws = Workspace::new(self.shape);
        for &i in indices {
            ws.sample_loss(self.params.as_slice(), d.sample(i), d.label(i), Some(&mut grad));
        }
        let scale = 1.0 / indices.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok(FlatParams(grad))
    }

    /// Predicted class per sample: argmax of the logits, ties to the lowest
    /// class index.
    pub fn predict(&self, d: &Dataset) -> Vec<usize> {
        let mut ws = Workspace::new(self.shape);
        (0..d.len())
            .map(|i| {
                ws.logits(self.params.as_slice(), d.sample(i));
                argmax(&ws.logits)
            })
            .collect()
    }

    pub fn accuracy(&self, d: &Dataset) -> f64 {
        let hits = self
            .predict(d)
            .iter()
            .zip(d.labels())
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / d.len() as f64
    }

    /// `tau` epochs of minibatch SGD on seeded shuffles of `d`.
    pub fn sgd_epochs(&self, d: &Dataset, opts: &SgdOptions) -> Result<Self> {
        self.check_data(d)?;
        let mut ws = Workspace::new(self.shape);
        let mut params = self.params.clone();
        sgd(&mut params.0, d.len(), opts, |theta, batch, grad| {
            for &i in batch {
                ws.sample_loss(theta, d.sample(i), d.label(i), Some(grad));
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
        })?;
        Ok(Self {
            shape: self.shape,
            params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdOptions {
    pub gamma: f64,
    pub tau: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Minibatch SGD over `n_samples` sample indices. `grad_fn` writes the mean
/// gradient at `theta` over the given batch into a zeroed buffer. The last
/// batch of an epoch may be short; `batch_size` larger than the data is
/// clamped to full-batch.
pub fn sgd<F>(theta: &mut [f64], n_samples: usize, opts: &SgdOptions, mut grad_fn: F) -> Result<()>
where
    F: FnMut(&[f64], &[usize], &mut [f64]),
{
    if !(opts.gamma >= 0.0 && opts.gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be >= 0", opts.gamma)));
    }
    if opts.tau == 0 {
        return Err(Error::InvalidArgument("tau must be at least 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if n_samples == 0 {
        return Err(Error::EmptyBatch);
    }
    let batch_size = opts.batch_size.min(n_samples);
    let mut rng = seed::rng(opts.seed);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut grad = vec![0.0; theta.len()];
    for _ in 0..opts.tau {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            grad_fn(theta, batch, &mut grad);
            for (t, gi) in theta.iter_mut().zip(&grad) {
                *t -= opts.gamma * gi;
            }
        }
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    shape: ModelShape,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    delta_hidden: Vec<f64>,
}

impl Workspace {
    fn new(shape: ModelShape) -> Self {
        Self {
            shape,
            hidden: vec![0.0; shape.hidden],
            logits: vec![0.0; shape.n_classes],
            delta_hidden: vec![0.0; shape.hidden],
        }
    }

    fn logits(&mut self, params: &[f64], x: &[f64]) {
        let s = self.shape;
        let (first, out) = params.split_at(s.first_layer_len());
        let (w2, b2) = out.split_at(s.n_classes * s.penultimate());
        let input: &[f64] = if s.hidden == 0 {
            x
        } else {
            let (w1, b1) = first.split_at(s.hidden * s.input_dim);
            for (h, (row, b)) in self
                .hidden
                .iter_mut()
                .zip(w1.chunks_exact(s.input_dim).zip(b1))
            {
                let z = b + dot(row, x);
                *h = z.max(0.0);
            }
            &self.hidden
        };
        for (l, (row, b)) in self
            .logits
            .iter_mut()
            .zip(w2.chunks_exact(s.penultimate()).zip(b2))
        {
            *l = b + dot(row, input);
        }
    }

    /// Cross-entropy of one sample; accumulates its gradient into `grad`.
    fn sample_loss(&mut self, params: &[f64], x: &[f64], y: usize, grad: Option<&mut [f64]>) -> f64 {
        self.logits(params, x);
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = self.logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let loss = log_z - self.logits[y];

        let Some(grad) = grad else {
            return loss;
        };
        let s = self.shape;
        // d loss / d logit = softmax - onehot, stored in place.
        for (c, l) in self.logits.iter_mut().enumerate() {
            *l = (*l - log_z).exp() - if c == y { 1.0 } else { 0.0 };
        }
        let (g_first, g_out) = grad.split_at_mut(s.first_layer_len());
        let (g_w2, g_b2) = g_out.split_at_mut(s.n_classes * s.penultimate());
        let input: &[f64] = if s.hidden == 0 { x } else { &self.hidden };
        for ((g_row, gb), &dl) in g_w2
            .chunks_exact_mut(s.penultimate())
            .zip(g_b2.iter_mut())
            .zip(&self.logits)
        {
            *gb += dl;
            axpy(dl, input, g_row);
        }
        if s.hidden == 0 {
            return loss;
        }

        let w2 = &params[s.first_layer_len()..s.first_layer_len() + s.n_classes * s.hidden];
        self.delta_hidden.iter_mut().for_each(|d| *d = 0.0);
        for (row, &dl) in w2.chunks_exact(s.hidden).zip(&self.logits) {
            axpy(dl, row, &mut self.delta_hidden);
        }
        let (g_w1, g_b1) = g_first.split_at_mut(s.hidden * s.input_dim);
        for (((g_row, gb), &dh), &h) in g_w1
            .chunks_exact_mut(s.input_dim)
            .zip(g_b1.iter_mut())
            .zip(&self.delta_hidden)
            .zip(&self.hidden)
        {
            // ReLU passes gradient only where the pre-activation was positive.
            if h > 0.0 {
                *gb += dh;
                axpy(dh, x, g_row);
            }
        }
        loss
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
