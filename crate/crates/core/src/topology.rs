//! Communication graphs and the mixing matrices that drive gossip averaging.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Undirected simple graph over `n_clients` clients.
///
/// Neighborhood lists are kept sorted by client index so that every traversal
/// of the graph is canonical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n_clients: usize,
    adjacency: Vec<bool>,
    neighborhoods: Vec<Vec<usize>>,
}

/// Largest supported network; the dense adjacency matrix holds `n^2` flags.
pub const MAX_CLIENTS: usize = 4096;

fn check_size(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("topology needs at least one client".into()));
    }
    if n > MAX_CLIENTS {
        return Err(Error::InvalidArgument(format!(
            "{n} clients exceed the supported maximum of {MAX_CLIENTS}"
        )));
    }
    Ok(())
}

impl Topology {
    /// Builds a topology from an edge list. Self-loops are rejected and
    /// duplicate edges collapse.
    pub fn from_edges(n_clients: usize, edges: &[(usize, usize)]) -> Result<Self> {
        check_size(n_clients)?;
        let mut adjacency = vec![false; n_clients * n_clients];
        for &(i, m) in edges {
            if i >= n_clients || m >= n_clients {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {m}) out of range for {n_clients} clients"
                )));
            }
            if i == m {
                return Err(Error::InvalidArgument(format!("self-loop on client {i}")));
            }
            adjacency[i * n_clients + m] = true;
            adjacency[m * n_clients + i] = true;
        }
        Ok(Self::from_adjacency(n_clients, adjacency))
    }

    fn from_adjacency(n_clients: usize, adjacency: Vec<bool>) -> Self {
        let neighborhoods = (0..n_clients)
            .map(|i| {
                (0..n_clients)
                    .filter(|&m| adjacency[i * n_clients + m])
                    .collect()
            })
            .collect();
        Self {
            n_clients,
            adjacency,
            neighborhoods,
        }
    }

    pub fn complete(n_clients: usize) -> Self {
        let mut adjacency = vec![true; n_clients * n_clients];
        for i in 0..n_clients {
            adjacency[i * n_clients + i] = false;
        }
        Self::from_adjacency(n_clients, adjacency)
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn is_edge(&self, i: usize, m: usize) -> bool {
        self.adjacency[i * self.n_clients + m]
    }

    /// Sorted neighbors of client `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighborhoods[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighborhoods.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges as `(i, m)` pairs with `i < m`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighborhoods
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&m| m > i).map(move |&m| (i, m)))
    }

    /// True iff a breadth-first traversal from client 0 reaches every client.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_clients];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(i) = queue.pop_front() {
            for &m in &self.neighborhoods[i] {
                if !seen[m] {
                    seen[m] = true;
                    reached += 1;
                    queue.push_back(m);
                }
            }
        }
        reached == self.n_clients
    }

    /// Metropolis weight `1 / (1 + max(deg i, deg m))` of an edge.
    pub fn metropolis_weight(&self, i: usize, m: usize) -> f64 {
        1.0 / (1 + self.degree(i).max(self.degree(m))) as f64
    }

    /// Serializes to the edge-list text format: a first line holding `n`,
    /// then one `i m` line per edge with `i < m`.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.n_clients);
        for (i, m) in self.edges() {
            let _ = writeln!(out, "{i} {m}");
        }
        out
    }

    /// Parses the edge-list text format. Blank lines are ignored.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(no, l)| (no + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (first_no, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing client count".into(),
        })?;
        let n: usize = first.parse().map_err(|_| Error::Parse {
            line: first_no,
            message: format!("invalid client count `{first}`"),
        })?;
        if let Err(e) = check_size(n) {
            return Err(Error::Parse {
                line: first_no,
                message: e.to_string(),
            });
        }
        let mut edges = Vec::new();
        for (no, line) in lines {
            let mut fields = line.split_whitespace();
            let parse = |f: Option<&str>| -> Result<usize> {
                f.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                    line: no,
                    message: format!("expected `i m`, got `{line}`"),
                })
            };
            let i = parse(fields.next())?;
            let m = parse(fields.next())?;
            if fields.next().is_some() {
                return Err(Error::Parse {
                    line: no,
                    message: format!("trailing fields in `{line}`"),
                });
            }
            if i >= m || m >= n {
                return Err(Error::Parse {
                    line: no,
                    message: format!("edge ({i}, {m}) must satisfy i < m < {n}"),
                });
            }
            edges.push((i, m));
        }
        Self::from_edges(n, &edges)
    }

    pub fn read_edge_list(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edge_list(&text)
    }

    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }
}

/// Samples an Erdős–Rényi graph: every unordered pair is an edge independently
/// with probability `p`. Pairs are visited in lexicographic order, one uniform
/// draw each, so the result is a pure function of `(n, p, seed)`.
pub fn generate_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Topology> {
    check_size(n)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("edge probability {p} not in [0, 1]")));
    }
    let mut rng = seed::rng(seed);
    let mut adjacency = vec![false; n * n];
    for i in 0..n {
        for m in (i + 1)..n {
            if rng.random::<f64>() < p {
                adjacency[i * n + m] = true;
                adjacency[m * n + i] = true;
            }
        }
    }
    Ok(Topology::from_adjacency(n, adjacency))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingKind {
    /// `1 / (|N_i| + 1)` on self and on each neighbor. Row-stochastic only.
    PaperUniform,
    /// Metropolis–Hastings weights. Symmetric and doubly stochastic.
    Metropolis,
}

impl std::str::FromStr for MixingKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paper-uniform" => Ok(Self::PaperUniform),
            "metropolis" => Ok(Self::Metropolis),
            _ => Err(format!("expected `paper-uniform` or `metropolis`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for MixingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PaperUniform => "paper-uniform",
            Self::Metropolis => "metropolis",
        })
    }
}

/// Dense `n x n` mixing matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    weights: Vec<f64>,
    kind: MixingKind,
}

impl MixingMatrix {
    pub fn new(t: &Topology, kind: MixingKind) -> Self {
        let n = t.n_clients();
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut weights[i * n..(i + 1) * n];
            match kind {
                MixingKind::PaperUniform => {
                    let w = 1.0 / (t.degree(i) + 1) as f64;
                    row[i] = w;
                    for &m in t.neighbors(i) {
                        row[m] = w;
                    }
                }
                MixingKind::Metropolis => {
                    let mut off = 0.0;
                    for &m in t.neighbors(i) {
                        let w = t.metropolis_weight(i, m);
                        row[m] = w;
                        off += w;
                    }
                    row[i] = 1.0 - off;
                }
            }
        }
        Self { n, weights, kind }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MixingKind {
        self.kind
    }

    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.weights[i * self.n + m]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|m| (self.get(i, m) - self.get(m, i)).abs() <= tol))
    }

    /// `y = W x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// Spectral gap `1 - lambda`, with `lambda` the second-largest eigenvalue
    /// magnitude of a symmetric mixing matrix.
    ///
    /// `lambda` is the spectral radius of `A = W - J/n`, found by power
    /// iteration on `A^2` (whose spectrum is nonnegative, so `+lambda` and
    /// `-lambda` do not make the iteration oscillate). The Rayleigh quotient
    /// must move by less than `1e-10` between steps before the cap.
    pub fn spectral_gap(&self) -> Result<f64> {
        if !self.is_symmetric(1e-12) {
            return Err(Error::NotSymmetric);
        }
        Ok(1.0 - self.second_eigenvalue_magnitude()?)
    }

    pub fn second_eigenvalue_magnitude(&self) -> Result<f64> {
        const TOL: f64 = 1e-10;
        const MAX_ITER: usize = 200_000;

        let n = self.n;
        if n == 1 {
            return Ok(0.0);
        }
        let deflate = |v: &mut [f64]| {
            let mean = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= mean);
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

        let mut rng = seed::rng(0x5EED_5EC7);
        let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        deflate(&mut x);
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);

        let mut prev = f64::NAN;
        for _ in 0..MAX_ITER {
            // A x = W x - mean(x) 1; x is kept mean-free, so deflating W x is enough.
            let mut y = self.apply(&x);
            deflate(&mut y);
            let mut z = self.apply(&y);
            deflate(&mut z);
            // Rayleigh quotient of A^2 at unit x is |A x|^2.
            let rho = y.iter().map(|v| v * v).sum::<f64>();
            let nz = norm(&z);
            if nz == 0.0 || rho == 0.0 {
                return Ok(0.0);
            }
            if (rho - prev).abs() < TOL {
                return Ok(rho.sqrt().min(1.0));
            }
            prev = rho;
            x = z.into_iter().map(|v| v / nz).collect();
        }
        Err(Error::NonConvergence { iterations: MAX_ITER })
    }
}
