//! Learnable communication graphs.
//!
//! # Orientation
//!
//! Row `i` of every adjacency matrix lists the agents whose messages agent
//! `i` **receives**: entry `(i, j) == 1` means the edge `j -> i` is active
//! and agent `i` may attend to agent `j`. Gates act on rows, so closing agent
//! `i`'s gate cuts everything it receives.
//!
//! The diagonal is always 1 (an agent always sees itself). It carries no
//! logit and does not count against the per-row budget `k`.
//!
//! # Training and execution
//!
//! * [`sample_khot_gumbel`] perturbs the logits with Gumbel noise and keeps
//!   the top `k` entries of every row. [`st_edges`] turns such a sample into
//!   a graph node whose forward value is the hard 0/1 matrix and whose
//!   backward pass flows through `softmax((alpha + g) / tau)`.
//! * [`argmax_khot`] is the noise-free selection used at execution time.
//! * [`apply_dynamic_gate`] / [`gate_edges`] zero the off-diagonal part of
//!   row `i` when agent `i`'s gate is closed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Parameter name of the adjacency logits inside a model store.
pub const ALPHA_PARAM: &str = "graph.alpha";

/// Per-row edge budget derived from a sparsity level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySpec {
    pub sparsity: f64,
    pub n_agents: usize,
    pub k: usize,
}

impl SparsitySpec {
    /// `k = max(1, round(sparsity * n_agents))`; requires `k < n_agents`.
    pub fn new(sparsity: f64, n_agents: usize) -> Result<Self> {
        if !(sparsity > 0.0 && sparsity <= 1.0) {
            return Err(Error::Sparsity(format!(
                "sparsity must lie in (0, 1], got {sparsity}"
            )));
        }
        let k = ((sparsity * n_agents as f64).round() as usize).max(1);
        Self::with_k(k, n_agents).map(|s| Self { sparsity, ..s })
    }

    pub fn with_k(k: usize, n_agents: usize) -> Result<Self> {
        if k == 0 || k >= n_agents {
            return Err(Error::Sparsity(format!(
                "{k} edges per row is impossible with {n_agents} agents (need 1 <= k < N)"
            )));
        }
        Ok(Self {
            sparsity: k as f64 / n_agents as f64,
            n_agents,
            k,
        })
    }

    /// Total off-diagonal edges in every graph produced under this spec.
    pub fn edge_count(&self) -> usize {
        self.k * self.n_agents
    }
}

/// Binary `N x N` receive-oriented adjacency matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommGraph {
    n: usize,
    edges: Vec<u8>,
}

impl CommGraph {
    /// Self-edges only.
    pub fn identity(n: usize) -> Self {
        let mut edges = vec![0; n * n];
        for i in 0..n {
            edges[i * n + i] = 1;
        }
        Self { n, edges }
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            edges: vec![1; n * n],
        }
    }

    /// Builds from explicit rows; the diagonal is forced on.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return shape_err("adjacency rows must form a square matrix");
        }
        let mut edges: Vec<u8> = rows.iter().flatten().map(|&v| u8::from(v != 0)).collect();
        for i in 0..n {
            edges[i * n + i] = 1;
        }
        Ok(Self { n, edges })
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    /// True when agent `i` receives from agent `j`.
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.n + j] != 0
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.edges
            .chunks(self.n.max(1))
            .map(<[u8]>::to_vec)
            .collect()
    }

    /// Off-diagonal ones in row `i`.
    pub fn out_degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && self.get(i, j)).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .edges
            .iter()
            .map(|&v| if v != 0 { T::one() } else { T::zero() })
            .collect();
        Tensor::new(&[self.n, self.n], data).expect("square by construction")
    }

    /// Off-diagonal ones divided by `N * (N - 1)`.
    pub fn density(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let off: usize = (0..self.n).map(|i| self.out_degree(i)).sum();
        off as f64 / (self.n * (self.n - 1)) as f64
    }
}

/// One stochastic graph draw plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct KhotSample<T> {
    pub graph: CommGraph,
    /// Gumbel noise, `N x N` (diagonal ignored).
    pub noise: Tensor<T>,
    /// Row-wise `softmax((alpha + noise) / tau)` over off-diagonal entries.
    pub soft_weights: Tensor<T>,
    pub tau: f64,
}

fn check_alpha<T: Scalar>(alpha: &Tensor<T>, spec: &SparsitySpec) -> Result<usize> {
    let n = spec.n_agents;
    if alpha.shape() != [n, n] {
        return shape_err(format!(
            "adjacency logits must be {n}x{n}, got {:?}",
            alpha.shape()
        ));
    }
    if spec.k >= n {
        return Err(Error::Sparsity(format!(
            "k = {} must be below N = {n}",
            spec.k
        )));
    }
    if let Some((idx, v)) = alpha
        .data()
        .iter()
        .enumerate()
        .find(|&(idx, v)| idx / n != idx % n && !v.is_finite())
    {
        return Err(Error::Numeric(format!("adjacency logit {idx} is {v}")));
    }
    Ok(n)
}

/// Indices of the `k` largest off-diagonal entries of `row`, ties broken
/// toward the lower column.
fn top_k_row<T: Scalar>(row: &[T], diag: usize, k: usize) -> Vec<usize> {
    let mut cols: Vec<usize> = (0..row.len()).filter(|&j| j != diag).collect();
    cols.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    cols.truncate(k);
    cols
}

fn khot_graph<T: Scalar>(scores: &[T], n: usize, k: usize) -> CommGraph {
    let mut edges = vec![0u8; n * n];
    for i in 0..n {
        edges[i * n + i] = 1;
        for j in top_k_row(&scores[i * n..(i + 1) * n], i, k) {
            edges[i * n + j] = 1;
        }
    }
    CommGraph { n, edges }
}

/// Deterministic execution graph: top-`k` logits per row.
pub fn argmax_khot<T: Scalar>(alpha: &Tensor<T>, spec: &SparsitySpec) -> Result<CommGraph> {
    let n = check_alpha(alpha, spec)?;
    Ok(khot_graph(alpha.data(), n, spec.k))
}

/// One Gumbel(0, 1) draw.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

pub fn gumbel_noise<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::c(gumbel(rng))).collect()).expect("sized above")
}

/// 1 off the diagonal, 0 on it.
pub fn off_diagonal<T: Scalar>(n: usize) -> Tensor<T> {
    let mut t = Tensor::ones(&[n, n]);
    for i in 0..n {
        t.set(&[i, i], T::zero());
    }
    t
}

/// `softmax((alpha + noise) / tau)` per row, restricted to off-diagonal
/// entries, as graph operations.
pub fn soft_weights<T: Scalar>(
    g: &mut Graph<T>,
    alpha: Var,
    noise: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    let n = g.shape(alpha)[0];
    let noise = g.constant(noise.clone());
    let perturbed = g.add(alpha, noise)?;
    let scaled = g.scale(perturbed, T::c(1.0 / tau));
    let mask = g.constant(off_diagonal(n));
    g.masked_softmax(scaled, mask)
}

/// k-hot Gumbel-max selection with explicit noise.
pub fn khot_from_noise<T: Scalar>(
    alpha: &Tensor<T>,
    spec: &SparsitySpec,
    noise: &Tensor<T>,
    tau: f64,
) -> Result<KhotSample<T>> {
    let n = check_alpha(alpha, spec)?;
    if noise.shape() != alpha.shape() {
        return shape_err("Gumbel noise must match the logits");
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "Gumbel temperature must be positive, got {tau}"
        )));
    }
    let perturbed: Vec<T> = alpha
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&a, &b)| a + b)
        .collect();
    let graph = khot_graph(&perturbed, n, spec.k);
    // Same operations as `st_edges` uses, so the reference is bit-identical.
    let mut g = Graph::new();
    let a = g.constant(alpha.clone());
    let soft = soft_weights(&mut g, a, noise, tau)?;
    let soft_weights = g.value(soft).clone();
    Ok(KhotSample {
        graph,
        noise: noise.clone(),
        soft_weights,
        tau,
    })
}

/// k-hot Gumbel-max selection with freshly drawn noise.
pub fn sample_khot_gumbel<T: Scalar>(
    alpha: &Tensor<T>,
    spec: &SparsitySpec,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<KhotSample<T>> {
    let noise = gumbel_noise(alpha.shape(), rng);
    khot_from_noise(alpha, spec, &noise, tau)
}

/// Straight-through edges for a sample: forward value is exactly the hard
/// graph (diagonal 1), gradients reach `alpha` through the soft weights.
pub fn st_edges<T: Scalar>(g: &mut Graph<T>, alpha: Var, sample: &KhotSample<T>) -> Result<Var> {
    let n = sample.graph.n_agents();
    let soft = soft_weights(g, alpha, &sample.noise, sample.tau)?;
    let mut hard = sample.graph.to_tensor::<T>();
    for i in 0..n {
        hard.set(&[i, i], T::zero());
    }
    let st = g.straight_through(&hard, soft, &sample.soft_weights)?;
    let eye = g.constant(Tensor::eye(n));
    g.add(st, eye)
}

/// Execution-time gating: off-diagonal entries of row `i` survive only when
/// `open[i]`.
pub fn apply_dynamic_gate(e: &CommGraph, open: &[bool]) -> Result<CommGraph> {
    let n = e.n_agents();
    if open.len() != n {
        return shape_err(format!(
            "gate vector has {} entries for {n} agents",
            open.len()
        ));
    }
    let mut out = e.clone();
    for (i, &h) in open.iter().enumerate() {
        if !h {
            for j in (0..n).filter(|&j| j != i) {
                out.edges[i * n + j] = 0;
            }
        }
    }
    Ok(out)
}

/// Differentiable gating: `(e - I) * h[:, :, None] + I`.
///
/// `edges` is `[B|1, N, N]`, `gates` is `[B, N]` with values in {0, 1}.
pub fn gate_edges<T: Scalar>(g: &mut Graph<T>, edges: Var, gates: Var) -> Result<Var> {
    let gs = g.shape(gates).to_vec();
    let es = g.shape(edges).to_vec();
    if gs.len() != 2 || es.len() != 3 || es[1] != gs[1] || es[2] != gs[1] {
        return shape_err(format!("gate_edges: edges {es:?}, gates {gs:?}"));
    }
    let n = gs[1];
    let eye = g.constant(Tensor::eye(n).reshaped(&[1, n, n])?);
    let off = g.sub(edges, eye)?;
    let h = g.reshape(gates, &[gs[0], n, 1])?;
    let gated = g.mul(off, h)?;
    g.add(gated, eye)
}

/// One row of the adjacency-evolution record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub iteration: u64,
    pub rows: Vec<Vec<u8>>,
}

pub fn snapshot(e: &CommGraph, iteration: u64) -> GraphSnapshot {
    GraphSnapshot {
        iteration,
        rows: e.rows(),
    }
}
