//! Lloyd's k-means with k-means++ seeding; the embedding-space baseline.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiceError};
use crate::numeric::{Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub n_init: usize,
    /// L2-normalize rows first (spherical k-means).
    pub spherical: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            n_init: 10,
            spherical: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every center update of the winning restart.
    pub inertia_history: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seed(x: &Matrix, k: usize, rng: &mut RngState) -> Matrix {
    let n = x.rows();
    let mut centers = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut best: Vec<f64> = x.row_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (b, row) in best.iter_mut().zip(x.row_iter()) {
            *b = b.min(sq_dist(row, centers.row(c)));
        }
    }
    centers
}

fn nearest(row: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.row_iter().enumerate() {
        let d = sq_dist(row, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn update_centers(x: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let mut centers = Matrix::zeros(k, x.cols());
    let mut counts = vec![0usize; k];
    for (row, &l) in x.row_iter().zip(labels) {
        counts[l] += 1;
        centers.row_mut(l).iter_mut().zip(row).for_each(|(c, v)| *c += v);
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            centers.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    centers
}

fn inertia(x: &Matrix, labels: &[usize], centers: &Matrix) -> f64 {
    x.row_iter()
        .zip(labels)
        .map(|(r, &l)| sq_dist(r, centers.row(l)))
        .sum()
}

/// Moves the point farthest from its center in the largest cluster into each empty cluster.
fn repair_empty(x: &Matrix, labels: &mut [usize], centers: &Matrix, k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        if counts[largest] < 2 {
            return;
        }
        let far = (0..labels.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&i, &j| {
                sq_dist(x.row(i), centers.row(largest))
                    .total_cmp(&sq_dist(x.row(j), centers.row(largest)))
                    .then(j.cmp(&i))
            })
            .unwrap();
        labels[far] = empty;
    }
}

fn lloyd(x: &Matrix, k: usize, max_iter: usize, rng: &mut RngState) -> KMeansResult {
    let mut centers = plus_plus_seed(x, k, rng);
    let mut labels = vec![usize::MAX; x.rows()];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        let mut changed = false;
        for (i, row) in x.row_iter().enumerate() {
            let (c, _) = nearest(row, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        iterations += 1;
        repair_empty(x, &mut labels, &centers, k);
        centers = update_centers(x, &labels, k);
        let current = inertia(x, &labels, &centers);
        if let Some(&prev) = history.last() {
            debug_assert!(
                current <= prev * (1.0 + 1e-12) + 1e-12,
                "k-means inertia increased: {prev} -> {current}"
            );
        }
        history.push(current);
    }
    let value = inertia(x, &labels, &centers);
    KMeansResult {
        centers,
        labels,
        inertia: value,
        iterations,
        inertia_history: history,
    }
}

/// Best of `n_init` k-means++ restarts by inertia (lowest restart index on ties).
pub fn kmeans(x: &Matrix, k: usize, cfg: &KMeansConfig, rng: &mut RngState) -> Result<KMeansResult> {
    if k == 0 || k > x.rows() {
        return Err(SpiceError::InvalidArgument(format!(
            "k-means needs 1 <= k <= N, got k={k}, N={}",
            x.rows()
        )));
    }
    if cfg.n_init == 0 || cfg.max_iter == 0 {
        return Err(SpiceError::Config("n_init and max_iter must be >= 1".into()));
    }
    let data = if cfg.spherical {
        x.l2_normalized_rows()
    } else {
        x.clone()
    };
    let base = rng.next_u64();
    let runs: Vec<KMeansResult> = (0..cfg.n_init as u64)
        .into_par_iter()
        .map(|r| lloyd(&data, k, cfg.max_iter, &mut RngState::derive(base, r)))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("n_init >= 1");
    Ok(best)
}
