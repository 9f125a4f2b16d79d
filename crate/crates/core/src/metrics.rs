//! Clustering evaluation: Hungarian-matched accuracy, normalized mutual
//! information and adjusted Rand index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiceError};

/// How NMI normalizes the mutual information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNorm {
    /// `I / sqrt(H(a)·H(b))`.
    #[default]
    Geometric,
    /// `I / ((H(a) + H(b)) / 2)`.
    Arithmetic,
}

/// Label-set contingency table with dense row/column ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Contingency {
    /// Original predicted label for each row.
    pub pred_labels: Vec<usize>,
    /// Original true label for each column.
    pub truth_labels: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

impl Contingency {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(SpiceError::shape(
                format!("{} predicted labels", truth.len()),
                pred.len(),
            ));
        }
        let dense = |labels: &[usize]| {
            let ids: BTreeMap<usize, usize> = labels
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, i))
                .collect();
            ids
        };
        let prow = dense(pred);
        let tcol = dense(truth);
        let mut counts = vec![vec![0u64; tcol.len()]; prow.len()];
        for (p, t) in pred.iter().zip(truth) {
            counts[prow[p]][tcol[t]] += 1;
        }
        Ok(Self {
            pred_labels: prow.keys().copied().collect(),
            truth_labels: tcol.keys().copied().collect(),
            counts,
            n: pred.len() as u64,
        })
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let mut out = vec![0; self.truth_labels.len()];
        for row in &self.counts {
            out.iter_mut().zip(row).for_each(|(o, c)| *o += c);
        }
        out
    }
}

/// Minimum-cost perfect assignment on a square cost matrix, O(n³)
/// (shortest augmenting paths with vertex potentials). Returns the column
/// assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // 1-based internally; index 0 is the virtual root column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Best one-to-one cluster→class accuracy and the matching that attains it.
/// Clusters left unmatched (more clusters than classes) map to `None`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<(f64, BTreeMap<usize, Option<usize>>)> {
    let table = Contingency::new(pred, truth)?;
    if table.n == 0 {
        return Err(SpiceError::InvalidArgument("empty labelings".into()));
    }
    let size = table.pred_labels.len().max(table.truth_labels.len());
    let max = table.counts.iter().flatten().copied().max().unwrap_or(0) as f64;
    let mut cost = vec![vec![max; size]; size];
    for (r, row) in table.counts.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            cost[r][c] = max - count as f64;
        }
    }
    let assign = hungarian(&cost);
    let mut matched = 0u64;
    let mut mapping = BTreeMap::new();
    for (r, &p) in table.pred_labels.iter().enumerate() {
        let c = assign[r];
        if c < table.truth_labels.len() {
            matched += table.counts[r][c];
            mapping.insert(p, Some(table.truth_labels[c]));
        } else {
            mapping.insert(p, None);
        }
    }
    Ok((matched as f64 / table.n as f64, mapping))
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information (natural log). When either labeling has zero
/// entropy the score is 1 if both are constant (same partition) and 0 otherwise.
pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNorm) -> Result<f64> {
    let table = Contingency::new(pred, truth)?;
    if table.n == 0 {
        return Err(SpiceError::InvalidArgument("empty labelings".into()));
    }
    let n = table.n as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let (ha, hb) = (entropy(&rows, n), entropy(&cols, n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ha == 0.0 && hb == 0.0 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (r, row) in table.counts.iter().enumerate() {
        for (c, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (rows[r] as f64 * cols[c] as f64)).ln();
            }
        }
    }
    let denom = match norm {
        NmiNorm::Geometric => (ha * hb).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (ha + hb),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNorm::Geometric)
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index; 1 by convention when the expected-index correction
/// leaves a zero denominator (both partitions trivial and identical).
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = Contingency::new(pred, truth)?;
    if table.n < 2 {
        return Err(SpiceError::InvalidArgument(format!(
            "ARI needs at least 2 samples, got {}",
            table.n
        )));
    }
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.row_sums().into_iter().map(comb2).sum();
    let sum_b: f64 = table.col_sums().into_iter().map(comb2).sum();
    let expected = sum_a * sum_b / comb2(table.n);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// All three scores plus the matching and contingency they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEval {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    /// `(predicted cluster, matched class)`; unmatched clusters are omitted.
    pub mapping: Vec<(usize, usize)>,
    /// Rows are predicted clusters, columns true classes, both in ascending label order.
    pub contingency: Vec<Vec<u64>>,
}

pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<ClusterEval> {
    let (acc, mapping) = accuracy(pred, truth)?;
    let table = Contingency::new(pred, truth)?;
    Ok(ClusterEval {
        acc,
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
        mapping: mapping
            .into_iter()
            .filter_map(|(p, t)| t.map(|t| (p, t)))
            .collect(),
        contingency: table.counts,
    })
}
