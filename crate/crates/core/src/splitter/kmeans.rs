//! Same-size k-means over the columns of `W1`.
//!
//! Each Lloyd iteration assigns points greedily in order of increasing
//! (point, centroid) distance with a capacity of `d_e` per cluster, then
//! swaps pairs of points between clusters while that lowers the total
//! distance. Ties go to the lower point index, then the lower cluster index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expert_width, ExpertPartition};
use crate::error::{Error, Result};
use crate::math::{FfnWeights, Matrix};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding driven by `rng`.
fn init_centroids(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // all remaining points coincide with a centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Matrix::from_fn(k, points.cols(), |c, j| points.get(chosen[c], j))
}

fn distance_table(points: &Matrix, centroids: &Matrix) -> Vec<f64> {
    let k = centroids.rows();
    let mut t = Vec::with_capacity(points.rows() * k);
    for i in 0..points.rows() {
        for c in 0..k {
            t.push(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    t
}

fn capacity_assign(dist: &[f64], n: usize, k: usize, cap: usize) -> Vec<usize> {
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..k).map(move |c| (i, c))).collect();
    pairs.sort_by(|&(i, c), &(j, d)| {
        dist[i * k + c]
            .total_cmp(&dist[j * k + d])
            .then(i.cmp(&j))
            .then(c.cmp(&d))
    });
    let mut assign = vec![usize::MAX; n];
    let mut load = vec![0usize; k];
    let mut left = n;
    for (i, c) in pairs {
        if assign[i] != usize::MAX || load[c] == cap {
            continue;
        }
        assign[i] = c;
        load[c] += 1;
        left -= 1;
        if left == 0 {
            break;
        }
    }
    assign
}

/// Swap point pairs across clusters while any swap strictly reduces the
/// summed squared distance to assigned centroids.
fn swap_refine(dist: &[f64], assign: &mut [usize], k: usize) {
    let n = assign.len();
    let tol = 1e-12;
    loop {
        let mut improved = false;
        for a in 0..n {
            let ca = assign[a];
            let mut best_gain = tol;
            let mut best_b = None;
            for b in 0..n {
                let cb = assign[b];
                if cb == ca {
                    continue;
                }
                let gain =
                    dist[a * k + ca] + dist[b * k + cb] - dist[a * k + cb] - dist[b * k + ca];
                if gain > best_gain {
                    best_gain = gain;
                    best_b = Some(b);
                }
            }
            if let Some(b) = best_b {
                assign.swap(a, b);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
}

fn update_centroids(points: &Matrix, assign: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        crate::math::axpy(1.0, points.row(i), sums.row_mut(c));
    }
    for (c, &cnt) in counts.iter().enumerate() {
        let inv = 1.0 / cnt.max(1) as f64;
        sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
    }
    sums
}

/// Balanced k-means over the rows of `points`. Every cluster receives
/// exactly `rows / k` points.
pub fn balanced_kmeans(
    points: &Matrix,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Vec<usize>> {
    let n = points.rows();
    let cap = expert_width(n, k)?;
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_centroids(points, k, &mut rng);
    let mut assign: Vec<usize> = Vec::new();
    for _ in 0..max_iter {
        let dist = distance_table(points, &centroids);
        let mut next = capacity_assign(&dist, n, k, cap);
        swap_refine(&dist, &mut next, k);
        let converged = next == assign;
        assign = next;
        centroids = update_centroids(points, &assign, k);
        if converged {
            break;
        }
    }
    Ok(assign)
}

/// Sum of squared distances from each point to its cluster mean.
pub fn within_cluster_sse(points: &Matrix, assign: &[usize], k: usize) -> f64 {
    let centroids = update_centroids(points, assign, k);
    assign
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(points.row(i), centroids.row(c)))
        .sum()
}

/// Parameter clustering split: balanced k-means on the `d_ff` columns of `W1`.
pub fn split_cluster(
    w: &FfnWeights,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ExpertPartition> {
    expert_width(w.d_ff, k)?;
    let columns = w.w1.transpose();
    let assign = balanced_kmeans(&columns, k, seed, max_iter)?;
    ExpertPartition::from_assignment(assign, k)
}
