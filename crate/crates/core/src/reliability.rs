//! Local semantic consistency: a sample is reliable when nearly all of its
//! cosine nearest neighbors carry its label.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiceError};
use crate::metrics::accuracy;
use crate::numeric::{desc_then_index, dot, Matrix};

const RELIABLE_HEADER: &str = "# spice-reliable v1";

fn check_neighbors(n: usize, n_s: usize) -> Result<()> {
    if n_s == 0 || n_s >= n {
        return Err(SpiceError::InvalidArgument(format!(
            "neighbor count must satisfy 1 <= n_s < N, got n_s={n_s}, N={n}"
        )));
    }
    Ok(())
}

fn similarities(unit: &Matrix, i: usize) -> Vec<f64> {
    let q = unit.row(i);
    unit.row_iter().map(|r| dot(q, r)).collect()
}

/// The `n_s` most cosine-similar samples to `i`, excluding `i`; full sort.
pub fn knn_indices(features: &Matrix, i: usize, n_s: usize) -> Result<Vec<usize>> {
    check_neighbors(features.rows(), n_s)?;
    if i >= features.rows() {
        return Err(SpiceError::InvalidArgument(format!("sample {i} out of range")));
    }
    let unit = features.l2_normalized_rows();
    Ok(knn_sorted(&unit, i, n_s))
}

fn knn_sorted(unit: &Matrix, i: usize, n_s: usize) -> Vec<usize> {
    let sims = similarities(unit, i);
    let mut idx: Vec<usize> = (0..unit.rows()).filter(|&j| j != i).collect();
    idx.sort_by(desc_then_index(&sims));
    idx.truncate(n_s);
    idx
}

fn knn_partial(unit: &Matrix, i: usize, n_s: usize) -> Vec<usize> {
    let sims = similarities(unit, i);
    let mut idx: Vec<usize> = (0..unit.rows()).filter(|&j| j != i).collect();
    let cmp = desc_then_index(&sims);
    if n_s < idx.len() {
        idx.select_nth_unstable_by(n_s - 1, &cmp);
        idx.truncate(n_s);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

/// Neighbor lists for every sample, computed in parallel with partial selection.
pub fn all_knn(features: &Matrix, n_s: usize) -> Result<Vec<Vec<usize>>> {
    check_neighbors(features.rows(), n_s)?;
    let unit = features.l2_normalized_rows();
    Ok((0..features.rows())
        .into_par_iter()
        .map(|i| knn_partial(&unit, i, n_s))
        .collect())
}

/// `β_i`: fraction of `i`'s neighbors that share its label.
pub fn local_consistency(features: &Matrix, labels: &[usize], n_s: usize) -> Result<Vec<f64>> {
    if labels.len() != features.rows() {
        return Err(SpiceError::shape(features.rows(), labels.len()));
    }
    let neighbors = all_knn(features, n_s)?;
    Ok(neighbors
        .iter()
        .enumerate()
        .map(|(i, nn)| nn.iter().filter(|&&j| labels[j] == labels[i]).count() as f64 / n_s as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliableSet {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub beta: Vec<f64>,
    pub n_s: usize,
    pub tau_c: f64,
}

impl ReliableSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Reliable samples per cluster `0..k`.
    pub fn per_cluster(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &l in &self.labels {
            if l < k {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Clusters in `0..k` with no reliable sample.
    pub fn starved_clusters(&self, k: usize) -> Vec<usize> {
        self.per_cluster(k)
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Fraction of selected samples whose label matches `truth` directly.
    pub fn purity(&self, truth: &[usize]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self
            .indices
            .iter()
            .zip(&self.labels)
            .filter(|(&i, &l)| truth[i] == l)
            .count();
        hits as f64 / self.len() as f64
    }

    /// Purity after renaming clusters to classes with the matching that
    /// maximizes agreement between the full `labels` and `truth`.
    pub fn aligned_purity(&self, labels: &[usize], truth: &[usize]) -> Result<f64> {
        if self.is_empty() {
            return Err(SpiceError::InvalidArgument("empty reliable set".into()));
        }
        let (_, mapping) = accuracy(labels, truth)?;
        let hits = self
            .indices
            .iter()
            .zip(&self.labels)
            .filter(|(&i, l)| mapping.get(l).copied().flatten() == Some(truth[i]))
            .count();
        Ok(hits as f64 / self.len() as f64)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{RELIABLE_HEADER} n_s={} tau_c={}", self.n_s, self.tau_c)?;
        for ((i, l), b) in self.indices.iter().zip(&self.labels).zip(&self.beta) {
            writeln!(w, "{i} {l} {b}")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(SpiceError::TextParse {
            line: 1,
            msg: "empty reliable-set file".into(),
        })??;
        let err = |line: usize, msg: String| SpiceError::TextParse { line, msg };
        let rest = header
            .trim()
            .strip_prefix(RELIABLE_HEADER)
            .ok_or_else(|| err(1, "missing `# spice-reliable v1` header".into()))?;
        let (mut n_s, mut tau_c) = (None, None);
        for tok in rest.split_whitespace() {
            match tok.split_once('=') {
                Some(("n_s", v)) => n_s = v.parse::<usize>().ok(),
                Some(("tau_c", v)) => tau_c = v.parse::<f64>().ok(),
                _ => return Err(err(1, format!("unexpected header token `{tok}`"))),
            }
        }
        let (n_s, tau_c) = n_s
            .zip(tau_c)
            .ok_or_else(|| err(1, "header needs n_s and tau_c".into()))?;
        let mut set = ReliableSet {
            indices: Vec::new(),
            labels: Vec::new(),
            beta: Vec::new(),
            n_s,
            tau_c,
        };
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err(line_no, format!("expected 3 fields, found {}", fields.len())));
            }
            let bad = |what: &str, v: &str| err(line_no, format!("bad {what} `{v}`"));
            set.indices
                .push(fields[0].parse().map_err(|_| bad("index", fields[0]))?);
            set.labels
                .push(fields[1].parse().map_err(|_| bad("label", fields[1]))?);
            set.beta
                .push(fields[2].parse().map_err(|_| bad("beta", fields[2]))?);
        }
        Ok(set)
    }
}

/// Samples with `β_i > τ_c` (strictly), in index order.
pub fn select_reliable(
    features: &Matrix,
    labels: &[usize],
    n_s: usize,
    tau_c: f64,
) -> Result<ReliableSet> {
    if !(tau_c > 0.0 && tau_c <= 1.0) {
        return Err(SpiceError::InvalidArgument(format!(
            "tau_c must lie in (0, 1], got {tau_c}"
        )));
    }
    let beta = local_consistency(features, labels, n_s)?;
    let mut set = ReliableSet {
        indices: Vec::new(),
        labels: Vec::new(),
        beta: Vec::new(),
        n_s,
        tau_c,
    };
    for (i, &b) in beta.iter().enumerate() {
        if b > tau_c {
            set.indices.push(i);
            set.labels.push(labels[i]);
            set.beta.push(b);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_purity_ignores_cluster_names() {
        let set = ReliableSet {
            indices: vec![0, 1, 3],
            labels: vec![1, 1, 0],
            beta: vec![1.0; 3],
            n_s: 1,
            tau_c: 0.5,
        };
        let labels = [1, 1, 0, 0];
        let truth = [0, 0, 1, 0];
        assert!((set.purity(&truth) - 1.0 / 3.0).abs() < 1e-15);
        // cluster 1 -> class 0 and cluster 0 -> class 1; sample 3 is mislabeled
        assert!((set.aligned_purity(&labels, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn collinear_middle_query() {
        // cosine neighbors: directions at 0°, 10°, 20°
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![10f64.to_radians().cos(), 10f64.to_radians().sin()],
            vec![20f64.to_radians().cos(), 20f64.to_radians().sin()],
        ])
        .unwrap();
        let mut nn = knn_indices(&f, 1, 2).unwrap();
        nn.sort_unstable();
        assert_eq!(nn, vec![0, 2]);
        assert!(knn_indices(&f, 1, 3).is_err());
    }

    #[test]
    fn duplicate_is_top_neighbor() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.2],
            vec![0.0, 1.0],
            vec![1.0, 0.2],
            vec![0.7, 0.7],
        ])
        .unwrap();
        assert_eq!(knn_indices(&f, 0, 1).unwrap(), vec![2]);
    }

    #[test]
    fn beta_arithmetic() {
        // query 0 at the origin direction; its four neighbors get labels 1,1,1,0
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.01],
            vec![1.0, 0.02],
            vec![1.0, 0.03],
            vec![1.0, 0.04],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let labels = [1, 1, 1, 1, 0, 1];
        let beta = local_consistency(&f, &labels, 4).unwrap();
        assert_eq!(beta[0], 0.75);
        let same = local_consistency(&f, &[2; 6], 4).unwrap();
        assert!(same.iter().all(|&b| b == 1.0));
    }

    #[test]
    fn strict_threshold_excludes_perfect_at_one() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        let set = select_reliable(&f, &[0, 0, 0], 1, 1.0).unwrap();
        assert!(set.is_empty());
        assert!(select_reliable(&f, &[0, 0, 0], 1, 0.0).is_err());
    }

    #[test]
    fn file_round_trip_and_starvation() {
        let set = ReliableSet {
            indices: vec![0, 4, 7],
            labels: vec![1, 1, 0],
            beta: vec![0.96, 1.0, 0.98],
            n_s: 50,
            tau_c: 0.95,
        };
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# spice-reliable v1 n_s=50 tau_c=0.95\n"));
        let back = ReliableSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, set);
        assert_eq!(set.starved_clusters(3), vec![2]);
        assert_eq!(set.per_cluster(2), vec![1, 2]);
        assert!(ReliableSet::read_from("0 1 1.0\n".as_bytes()).is_err());
    }
}
