//! Expert construction: assign every middle neuron to one of `k`
//! equal-size experts and slice the FFN parameters accordingly.

mod coactivation;
mod kmeans;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::shuffled_indices;
use crate::error::{shape_err, Error, Result};
use crate::math::{axpy, relu, FfnWeights, Matrix, Vector};

pub use coactivation::{
    build_coactivation_graph, cut_weight, partition_graph, split_coactivation, CoActivationGraph,
    Edge, GraphPartition, PartitionOptions, DEFAULT_QUANTILE,
};
pub use kmeans::{balanced_kmeans, split_cluster, within_cluster_sse};

/// Balanced assignment of `d_ff` neurons to `k` experts.
///
/// Experts and neurons are 0-based here; the partition file uses 1-based
/// expert indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertPartition {
    k: usize,
    d_e: usize,
    assignment: Vec<usize>,
    /// `permutation[n]` is the position of neuron `n` after permuting.
    permutation: Vec<usize>,
    /// `inverse[p]` is the neuron at permuted position `p`.
    inverse: Vec<usize>,
}

impl ExpertPartition {
    pub fn from_assignment(assignment: Vec<usize>, k: usize) -> Result<Self> {
        let d_ff = assignment.len();
        let d_e = expert_width(d_ff, k)?;
        let mut rank = vec![0usize; k];
        let mut permutation = Vec::with_capacity(d_ff);
        for (n, &e) in assignment.iter().enumerate() {
            if e >= k {
                return Err(Error::Config(format!(
                    "neuron {n} assigned to expert {e}, only {k} experts"
                )));
            }
            if rank[e] == d_e {
                return Err(Error::Config(format!(
                    "expert {e} has more than {d_e} members"
                )));
            }
            // f(n) = e(n)·d_e + rank of n within its expert
            permutation.push(e * d_e + rank[e]);
            rank[e] += 1;
        }
        let mut inverse = vec![0usize; d_ff];
        for (n, &p) in permutation.iter().enumerate() {
            inverse[p] = n;
        }
        Ok(Self {
            k,
            d_e,
            assignment,
            permutation,
            inverse,
        })
    }

    /// Neuron `n` goes to expert `n / d_e`; the permutation is the identity.
    pub fn identity(d_ff: usize, k: usize) -> Result<Self> {
        let d_e = expert_width(d_ff, k)?;
        Self::from_assignment((0..d_ff).map(|n| n / d_e).collect(), k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn d_ff(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn expert_of(&self, neuron: usize) -> usize {
        self.assignment[neuron]
    }

    /// Members of expert `i` in ascending neuron order.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.inverse[i * self.d_e..(i + 1) * self.d_e]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &e in &self.assignment {
            s[e] += 1;
        }
        s
    }
}

pub(crate) fn expert_width(d_ff: usize, k: usize) -> Result<usize> {
    if k == 0 || d_ff == 0 || !d_ff.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "number of experts k={k} must divide d_ff={d_ff}"
        )));
    }
    Ok(d_ff / k)
}

/// Random split. Seed 0 is the identity split; any other seed shuffles
/// neurons uniformly before cutting into blocks.
pub fn split_random(d_ff: usize, k: usize, seed: u64) -> Result<ExpertPartition> {
    let d_e = expert_width(d_ff, k)?;
    if seed == 0 {
        return ExpertPartition::identity(d_ff, k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = shuffled_indices(d_ff, &mut rng);
    ExpertPartition::from_assignment(slots.into_iter().map(|s| s / d_e).collect(), k)
}

/// One expert's slice of the FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `d_model × d_e`
    pub w1: Matrix,
    pub b1: Vector,
    /// `d_e × d_model`
    pub w2: Matrix,
}

impl Expert {
    pub fn preactivation(&self, x: &[f64]) -> Result<Vector> {
        let mut h = self.w1.vec_mul(x)?;
        axpy(1.0, &self.b1, &mut h);
        Ok(h)
    }

    /// `relu(x·W1ⁱ + b1ⁱ)·W2ⁱ`, without `b2`.
    pub fn contribution(&self, x: &[f64]) -> Result<Vector> {
        self.w2.vec_mul(&relu(&self.preactivation(x)?))
    }

    pub fn column_mean(&self) -> Vector {
        let d_e = self.w1.cols() as f64;
        (0..self.w1.rows())
            .map(|r| self.w1.row(r).iter().sum::<f64>() / d_e)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub d_model: usize,
    pub experts: Vec<Expert>,
    pub b2: Vector,
}

impl ExpertWeights {
    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn d_e(&self) -> usize {
        self.experts.first().map_or(0, |e| e.b1.len())
    }

    /// `(W1·P, b1·P, Pᵀ·W2)` by concatenating the expert blocks.
    pub fn concatenated(&self) -> (Matrix, Vector, Matrix) {
        let d_e = self.d_e();
        let d_ff = d_e * self.k();
        let w1p = Matrix::from_fn(self.d_model, d_ff, |r, c| {
            self.experts[c / d_e].w1.get(r, c % d_e)
        });
        let b1p = self
            .experts
            .iter()
            .flat_map(|e| e.b1.iter().copied())
            .collect();
        let w2p = Matrix::from_fn(d_ff, self.d_model, |r, c| {
            self.experts[r / d_e].w2.get(r % d_e, c)
        });
        (w1p, b1p, w2p)
    }

    /// Undo the permutation and return dense weights in original neuron order.
    pub fn to_dense(&self, p: &ExpertPartition) -> Result<FfnWeights> {
        let (w1p, b1p, w2p) = self.concatenated();
        if p.d_ff() != b1p.len() {
            return shape_err("partition does not match expert weights");
        }
        let perm = p.permutation();
        let w1 = Matrix::from_fn(self.d_model, p.d_ff(), |r, n| w1p.get(r, perm[n]));
        let b1 = (0..p.d_ff()).map(|n| b1p[perm[n]]).collect();
        let w2 = Matrix::from_fn(p.d_ff(), self.d_model, |n, c| w2p.get(perm[n], c));
        FfnWeights::new(w1, b1, w2, self.b2.clone())
    }
}

/// Slice `w` into per-expert blocks following `p`.
pub fn materialize_experts(w: &FfnWeights, p: &ExpertPartition) -> Result<ExpertWeights> {
    if p.d_ff() != w.d_ff || p.k() * p.d_e() != w.d_ff {
        return shape_err(format!(
            "partition covers {} neurons, FFN has {}",
            p.d_ff(),
            w.d_ff
        ));
    }
    let experts = (0..p.k())
        .map(|i| {
            let members = p.members(i);
            Expert {
                w1: Matrix::from_fn(w.d_model, p.d_e(), |r, c| w.w1.get(r, members[c])),
                b1: members.iter().map(|&n| w.b1[n]).collect(),
                w2: Matrix::from_fn(p.d_e(), w.d_model, |r, c| w.w2.get(members[r], c)),
            }
        })
        .collect();
    Ok(ExpertWeights {
        d_model: w.d_model,
        experts,
        b2: w.b2.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMethod {
    Random,
    Cluster,
    Coact,
}

impl SplitMethod {
    pub const ALL: [SplitMethod; 3] = [
        SplitMethod::Random,
        SplitMethod::Cluster,
        SplitMethod::Coact,
    ];
}

impl fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMethod::Random => "random",
            SplitMethod::Cluster => "cluster",
            SplitMethod::Coact => "coact",
        })
    }
}

impl FromStr for SplitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitMethod::Random),
            "cluster" => Ok(SplitMethod::Cluster),
            "coact" | "co-activation" => Ok(SplitMethod::Coact),
            other => Err(Error::Config(format!("unknown split method {other:?}"))),
        }
    }
}

/// On-disk form of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub k: usize,
    pub d_e: usize,
    /// 1-based expert index per neuron.
    pub assignment: Vec<usize>,
    pub method: SplitMethod,
    pub seed: u64,
    pub quantile: Option<f64>,
}

impl PartitionFile {
    pub fn new(p: &ExpertPartition, method: SplitMethod, seed: u64, quantile: Option<f64>) -> Self {
        Self {
            k: p.k(),
            d_e: p.d_e(),
            assignment: p.assignment().iter().map(|e| e + 1).collect(),
            method,
            seed,
            quantile,
        }
    }

    pub fn to_partition(&self) -> Result<ExpertPartition> {
        if self.assignment.contains(&0) {
            return Err(Error::Config("partition file assignment is 1-based".into()));
        }
        let p = ExpertPartition::from_assignment(
            self.assignment.iter().map(|e| e - 1).collect(),
            self.k,
        )?;
        if p.d_e() != self.d_e {
            return Err(Error::Config(format!(
                "d_e={} inconsistent with {} neurons and k={}",
                self.d_e,
                self.assignment.len(),
                self.k
            )));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
