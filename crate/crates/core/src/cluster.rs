//! K-means (Lloyd iterations, k-means++ seeding, best of several restarts).

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factor::FeatureSpace;
use crate::rng::stream_rng;

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// K × feature-dimension.
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
    pub k: usize,
    pub seed: u64,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
    /// Final inertia of each restart, in restart order.
    pub restart_inertias: Vec<f64>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == cluster)
            .collect()
    }

    /// An assignment of every point to one cluster.
    pub fn single(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            centroids: DMatrix::zeros(1, 0),
            inertia: 0.0,
            k: 1,
            seed: 0,
            inertia_trace: vec![],
            restart_inertias: vec![],
        }
    }
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, k: usize) -> f64 {
    (0..x.ncols()).map(|j| (x[(i, j)] - c[(k, j)]).powi(2)).sum()
}

fn nearest(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..c.nrows() {
        let d = sq_dist(x, i, c, k);
        // Strict comparison keeps the lowest index on ties.
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(x: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut centroids = DMatrix::zeros(k, p);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            if d2[chosen] == 0.0 {
                chosen = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from(&x.row(pick));
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(x, i, &centroids, c));
        }
    }
    centroids
}

fn recompute_centroids(x: &DMatrix<f64>, labels: &[usize], k: usize, centroids: &mut DMatrix<f64>) -> Vec<usize> {
    let p = x.ncols();
    let mut counts = vec![0usize; k];
    let mut sums = DMatrix::<f64>::zeros(k, p);
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for j in 0..p {
            sums[(l, j)] += x[(i, j)];
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..p {
                centroids[(c, j)] = sums[(c, j)] / counts[c] as f64;
            }
        }
    }
    counts
}

fn inertia_of(x: &DMatrix<f64>, labels: &[usize], c: &DMatrix<f64>) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(x, i, c, l))
        .sum()
}

struct Run {
    labels: Vec<usize>,
    centroids: DMatrix<f64>,
    inertia: f64,
    trace: Vec<f64>,
}

fn lloyd(x: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> Run {
    let n = x.nrows();
    let mut centroids = plus_plus_init(x, k, rng);
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(x, i, &centroids).0).collect();
    let mut trace = Vec::new();

    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut counts = recompute_centroids(x, &labels, k, &mut centroids);
        // Empty-cluster repair: move the point farthest from its centroid
        // (among clusters that can spare one) into each empty cluster.
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let donor = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(x, a, &centroids, labels[a])
                        .total_cmp(&sq_dist(x, b, &centroids, labels[b]))
                        .then(b.cmp(&a))
                });
            let Some(i) = donor else { break };
            labels[i] = empty;
            counts = recompute_centroids(x, &labels, k, &mut centroids);
        }
        trace.push(inertia_of(x, &labels, &centroids));

        let new_labels: Vec<usize> = (0..n).map(|i| nearest(x, i, &centroids).0).collect();
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    let inertia = inertia_of(x, &labels, &centroids);
    Run {
        labels,
        centroids,
        inertia,
        trace,
    }
}

/// Runs `restarts` independent k-means++/Lloyd passes and keeps the one with
/// the smallest inertia (earliest restart on ties). Restart `r` draws from
/// the stream derived from `(seed, r)`, so the result does not depend on
/// scheduling.
pub fn kmeans(features: &FeatureSpace, k: usize, restarts: usize, seed: u64) -> Result<ClusterAssignment> {
    kmeans_matrix(&features.matrix, k, restarts, seed)
}

pub fn kmeans_matrix(x: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = x.nrows();
    if n == 0 || x.ncols() == 0 {
        return Err(Error::input("empty feature matrix"));
    }
    if k == 0 || k > n {
        return Err(Error::input(format!("K = {k} must lie in 1..={n}")));
    }
    if restarts == 0 {
        return Err(Error::input("restarts must be at least 1"));
    }
    let runs: Vec<Run> = (0..restarts)
        .into_par_iter()
        .map(|r| lloyd(x, k, &mut stream_rng(seed, r as u64)))
        .collect();
    let restart_inertias: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| runs[a].inertia.total_cmp(&runs[b].inertia).then(a.cmp(&b)))
        .unwrap_or(0);
    let run = runs.into_iter().nth(best).expect("at least one restart");
    Ok(ClusterAssignment {
        labels: run.labels,
        centroids: run.centroids,
        inertia: run.inertia,
        k,
        seed,
        inertia_trace: run.trace,
        restart_inertias,
    })
}
