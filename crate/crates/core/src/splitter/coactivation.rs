//! Co-activation graph and balanced k-way partitioning.
//!
//! Edge weight between neurons `n` and `m` is `Σ_x h_n·h_m` over samples
//! where both are positive. The partitioner grows `k` groups greedily from
//! seeded start nodes, then applies pairwise swaps between groups while any
//! swap strictly lowers the cut weight. Several seeded restarts are run and
//! the lowest cut is kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::balanced_kmeans;
use super::{expert_width, ExpertPartition};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::profiler::ActivationTrace;

pub const DEFAULT_QUANTILE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Undirected weighted graph on neurons; `a < b` for every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct CoActivationGraph {
    pub nodes: usize,
    pub edges: Vec<Edge>,
}

impl CoActivationGraph {
    pub fn new(nodes: usize, edges: Vec<Edge>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            if e.a >= e.b || e.b >= nodes {
                return Err(Error::Config(format!(
                    "edge ({}, {}) must satisfy a < b < {nodes}",
                    e.a, e.b
                )));
            }
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(Error::Numeric(format!("edge weight {}", e.weight)));
            }
            if !seen.insert((e.a, e.b)) {
                return Err(Error::Config(format!("duplicate edge ({}, {})", e.a, e.b)));
            }
        }
        Ok(Self { nodes, edges })
    }

    /// Symmetric `nodes × nodes` weight matrix with zero diagonal.
    pub fn dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.nodes, self.nodes);
        for e in &self.edges {
            m.set(e.a, e.b, e.weight);
            m.set(e.b, e.a, e.weight);
        }
        m
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }
}

/// Linear-interpolated quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Build the co-activation graph of a trace and drop edges whose weight is
/// below the `quantile` of the nonzero weights.
pub fn build_coactivation_graph(t: &ActivationTrace, quantile: f64) -> Result<CoActivationGraph> {
    if !(0.0..1.0).contains(&quantile) {
        return Err(Error::Config(format!(
            "quantile must be in [0, 1), got {quantile}"
        )));
    }
    if t.samples() == 0 {
        return Err(Error::Empty("activation trace"));
    }
    let n = t.d_ff();
    let mut acc = vec![0.0f64; n * n];
    let mut active: Vec<(usize, f64)> = Vec::with_capacity(n);
    for s in 0..t.samples() {
        active.clear();
        active.extend(
            t.row(s)
                .iter()
                .copied()
                .enumerate()
                .filter(|&(_, v)| v > 0.0),
        );
        for (i, &(a, va)) in active.iter().enumerate() {
            let row = &mut acc[a * n..(a + 1) * n];
            for &(b, vb) in &active[i + 1..] {
                row[b] += va * vb;
            }
        }
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let w = acc[a * n + b];
            if w > 0.0 {
                edges.push(Edge { a, b, weight: w });
            }
        }
    }
    if !edges.is_empty() && quantile > 0.0 {
        let mut weights: Vec<f64> = edges.iter().map(|e| e.weight).collect();
        weights.sort_by(f64::total_cmp);
        let threshold = quantile_sorted(&weights, quantile);
        edges.retain(|e| e.weight >= threshold);
    }
    CoActivationGraph::new(n, edges)
}

/// Total weight of edges whose endpoints lie in different groups.
pub fn cut_weight(g: &CoActivationGraph, assignment: &[usize]) -> f64 {
    g.edges
        .iter()
        .filter(|e| assignment[e.a] != assignment[e.b])
        .map(|e| e.weight)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionOptions {
    pub restarts: usize,
    pub max_passes: usize,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self {
            restarts: 16,
            max_passes: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphPartition {
    pub assignment: Vec<usize>,
    pub cut: f64,
    /// Cut weight after seeding and after every accepted swap, for the
    /// restart that was kept.
    pub cut_history: Vec<f64>,
}

fn greedy_seed(w: &Matrix, k: usize, d_e: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = w.rows();
    let mut assign = vec![usize::MAX; n];
    // connection of each unassigned node to the group being grown
    let mut link = vec![0.0f64; n];
    for group in 0..k {
        let free: Vec<usize> = (0..n).filter(|&v| assign[v] == usize::MAX).collect();
        if group == k - 1 {
            for v in free {
                assign[v] = group;
            }
            break;
        }
        let start = free[rng.random_range(0..free.len())];
        link.iter_mut().for_each(|l| *l = 0.0);
        let add = |v: usize, assign: &mut Vec<usize>, link: &mut Vec<f64>| {
            assign[v] = group;
            for (u, l) in link.iter_mut().enumerate() {
                *l += w.get(v, u);
            }
        };
        add(start, &mut assign, &mut link);
        for _ in 1..d_e {
            let mut best: Option<usize> = None;
            for v in 0..n {
                if assign[v] != usize::MAX {
                    continue;
                }
                if best.is_none_or(|b| link[v] > link[b]) {
                    best = Some(v);
                }
            }
            add(best.expect("enough free nodes"), &mut assign, &mut link);
        }
    }
    assign
}

/// Pairwise swap refinement; returns the cut after every accepted swap.
#[allow(clippy::needless_range_loop)]
fn swap_refine(
    w: &Matrix,
    assign: &mut [usize],
    k: usize,
    initial_cut: f64,
    max_passes: usize,
) -> Vec<f64> {
    let n = assign.len();
    let mut conn = Matrix::zeros(n, k);
    for v in 0..n {
        for u in 0..n {
            let wv = w.get(v, u);
            if wv != 0.0 {
                let c = conn.get(v, assign[u]) + wv;
                conn.set(v, assign[u], c);
            }
        }
    }
    let scale: f64 = w.data().iter().sum::<f64>() * 0.5;
    let tol = 1e-12 * (1.0 + scale);
    let mut cut = initial_cut;
    let mut history = vec![cut];
    for _ in 0..max_passes {
        let mut improved = false;
        for a in 0..n {
            let pa = assign[a];
            let mut best_gain = tol;
            let mut best_b = None;
            for b in 0..n {
                let pb = assign[b];
                if pb == pa {
                    continue;
                }
                let gain = conn.get(a, pb) - conn.get(a, pa) + conn.get(b, pa)
                    - conn.get(b, pb)
                    - 2.0 * w.get(a, b);
                if gain > best_gain {
                    best_gain = gain;
                    best_b = Some(b);
                }
            }
            let Some(b) = best_b else { continue };
            let pb = assign[b];
            for v in 0..n {
                let wa = w.get(v, a);
                let wb = w.get(v, b);
                if wa != 0.0 || wb != 0.0 {
                    conn.set(v, pa, conn.get(v, pa) - wa + wb);
                    conn.set(v, pb, conn.get(v, pb) + wa - wb);
                }
            }
            assign[a] = pb;
            assign[b] = pa;
            cut -= best_gain;
            history.push(cut);
            improved = true;
        }
        if !improved {
            break;
        }
    }
    history
}

/// Seed from balanced k-means over adjacency rows scaled to unit length,
/// so neurons with similar neighbourhoods start together regardless of
/// their degree.
fn spectral_like_seed(w: &Matrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rows = w.clone();
    for v in 0..rows.rows() {
        let r = rows.row_mut(v);
        let len = crate::math::norm(r);
        if len > 0.0 {
            r.iter_mut().for_each(|x| *x /= len);
        }
    }
    balanced_kmeans(&rows, k, seed, 20)
}

/// Balanced k-way partition that keeps heavy edges inside groups.
pub fn partition_graph(
    g: &CoActivationGraph,
    k: usize,
    seed: u64,
    opts: PartitionOptions,
) -> Result<GraphPartition> {
    let d_e = expert_width(g.nodes, k)?;
    let w = g.dense();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<GraphPartition> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut assign = if restart == 0 {
            spectral_like_seed(&w, k, seed)?
        } else {
            greedy_seed(&w, k, d_e, &mut rng)
        };
        let start_cut = cut_weight(g, &assign);
        let history = swap_refine(&w, &mut assign, k, start_cut, opts.max_passes);
        // recompute exactly rather than trusting accumulated gains
        let cut = cut_weight(g, &assign);
        if best.as_ref().is_none_or(|b| cut < b.cut) {
            best = Some(GraphPartition {
                assignment: assign,
                cut,
                cut_history: history,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Co-activation graph split with default partitioner options.
pub fn split_coactivation(g: &CoActivationGraph, k: usize, seed: u64) -> Result<ExpertPartition> {
    let gp = partition_graph(g, k, seed, PartitionOptions::default())?;
    ExpertPartition::from_assignment(gp.assignment, k)
}
