//! Per-batch semantic pseudo-labeling: pick each cluster's most confident
//! samples, average their embeddings into prototypes, then label the samples
//! most cosine-similar to each prototype.
//!
//! How samples claimed by several prototypes are resolved is a
//! [`LabelAssigner`] strategy (`overlap` or `non-overlap`).

use std::fmt::Debug;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiceError};
use crate::numeric::{dot, top_k_indices, Matrix};
use crate::registry::{Registry, StrategySpec};

/// Sentinel similarity for zero-norm samples; below any real cosine.
const ZERO_NORM_SIMILARITY: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub k: usize,
    /// Fraction `r` of the balanced share `M/k` used to build prototypes.
    pub confident_ratio: f64,
    pub assignment: StrategySpec,
    /// Samples labeled per cluster; `None` means `⌊M/k⌋`.
    pub n_per_cluster: Option<usize>,
}

impl PseudoLabelConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            confident_ratio: 0.5,
            assignment: StrategySpec::new("overlap"),
            n_per_cluster: None,
        }
    }

    /// `n_t = ⌊r·M/k⌋`.
    pub fn confident_count(&self, batch: usize) -> Result<usize> {
        if !(self.confident_ratio > 0.0 && self.confident_ratio <= 1.0) {
            return Err(SpiceError::Config(format!(
                "confident ratio must lie in (0, 1], got {}",
                self.confident_ratio
            )));
        }
        let n_t = (self.confident_ratio * batch as f64 / self.k as f64).floor() as usize;
        if n_t == 0 {
            return Err(SpiceError::Config(format!(
                "floor(r*M/k) = 0 for r={}, M={batch}, k={}; raise r or the batch size",
                self.confident_ratio, self.k
            )));
        }
        Ok(n_t)
    }

    /// `n`, defaulting to `⌊M/k⌋`, capped at `M`.
    pub fn labeled_count(&self, batch: usize) -> Result<usize> {
        let n = self.n_per_cluster.unwrap_or(batch / self.k.max(1));
        if n == 0 {
            return Err(SpiceError::Config(format!(
                "no samples to label per cluster for M={batch}, k={}",
                self.k
            )));
        }
        Ok(n.min(batch))
    }
}

/// Labeled subset of one large batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    /// Batch-local indices; a sample may appear more than once in overlap mode.
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Prototypes, one row per cluster.
    pub centers: Matrix,
    /// Clusters with a zero-norm prototype or no sample predicted into them.
    pub degenerate: Vec<usize>,
}

impl PseudoBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Resolves the per-cluster nearest-sample lists into `(sample, label)` entries.
pub trait LabelAssigner: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    /// `nearest[c]` lists the samples chosen for cluster `c`, most similar
    /// first; `similarity` is the M×k sample-to-prototype cosine matrix.
    fn assign(&self, nearest: &[Vec<usize>], similarity: &Matrix) -> Vec<(usize, usize)>;
}

/// Every sample keeps every label it was chosen for.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapAssignment;

impl LabelAssigner for OverlapAssignment {
    fn name(&self) -> &'static str {
        "overlap"
    }

    fn assign(&self, nearest: &[Vec<usize>], _similarity: &Matrix) -> Vec<(usize, usize)> {
        nearest
            .iter()
            .enumerate()
            .flat_map(|(c, idx)| idx.iter().map(move |&i| (i, c)))
            .collect()
    }
}

/// A sample chosen by several clusters keeps only its most similar one
/// (lower cluster id on ties). Vacated slots are not refilled.
#[derive(Debug, Clone, Copy, Default)]
pub struct NonOverlapAssignment;

impl LabelAssigner for NonOverlapAssignment {
    fn name(&self) -> &'static str {
        "non-overlap"
    }

    fn assign(&self, nearest: &[Vec<usize>], similarity: &Matrix) -> Vec<(usize, usize)> {
        let mut owner: Vec<Option<usize>> = vec![None; similarity.rows()];
        for (c, idx) in nearest.iter().enumerate() {
            for &i in idx {
                owner[i] = match owner[i] {
                    Some(prev) if similarity.get(i, prev) >= similarity.get(i, c) => Some(prev),
                    _ => Some(c),
                };
            }
        }
        nearest
            .iter()
            .enumerate()
            .flat_map(|(c, idx)| idx.iter().map(move |&i| (i, c)))
            .filter(|&(i, c)| owner[i] == Some(c))
            .collect()
    }
}

pub fn assignment_registry() -> &'static Registry<dyn LabelAssigner> {
    static REG: OnceLock<Registry<dyn LabelAssigner>> = OnceLock::new();
    REG.get_or_init(|| {
        Registry::<dyn LabelAssigner>::new("assignment")
            .register("overlap", &[], "samples may carry several labels", |_| {
                Ok(Box::new(OverlapAssignment))
            })
            .register(
                "non-overlap",
                &["non_overlap", "nonoverlap"],
                "contested samples keep their most similar cluster",
                |_| Ok(Box::new(NonOverlapAssignment)),
            )
    })
}

/// `n_t` highest-probability samples of column `c`.
pub fn confident_indices(probs: &Matrix, c: usize, cfg: &PseudoLabelConfig) -> Result<Vec<usize>> {
    if c >= probs.cols() {
        return Err(SpiceError::InvalidLabel {
            label: c,
            k: probs.cols(),
        });
    }
    let n_t = cfg.confident_count(probs.rows())?;
    top_k_indices(&probs.column(c), n_t.min(probs.rows()))
}

/// Row `c` is the mean embedding of cluster `c`'s confident samples.
pub fn compute_prototypes(
    features: &Matrix,
    probs: &Matrix,
    cfg: &PseudoLabelConfig,
) -> Result<Matrix> {
    if features.rows() != probs.rows() {
        return Err(SpiceError::shape(features.rows(), probs.rows()));
    }
    if probs.cols() != cfg.k {
        return Err(SpiceError::shape(format!("{} clusters", cfg.k), probs.cols()));
    }
    let mut centers = Matrix::zeros(cfg.k, features.cols());
    for c in 0..cfg.k {
        let idx = confident_indices(probs, c, cfg)?;
        let row = centers.row_mut(c);
        for &i in &idx {
            row.iter_mut().zip(features.row(i)).for_each(|(a, b)| *a += b);
        }
        let n = idx.len() as f64;
        row.iter_mut().for_each(|a| *a /= n);
    }
    Ok(centers)
}

/// M×k cosine similarities between samples and prototypes. Zero-norm
/// prototypes are reported separately and get an all-sentinel column.
pub fn prototype_similarity(features: &Matrix, centers: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    if features.cols() != centers.cols() {
        return Err(SpiceError::shape(features.cols(), centers.cols()));
    }
    let norms: Vec<f64> = features.row_iter().map(|r| dot(r, r).sqrt()).collect();
    let unit = centers.l2_normalized_rows();
    let mut degenerate = Vec::new();
    for c in 0..centers.rows() {
        if dot(unit.row(c), unit.row(c)) == 0.0 {
            degenerate.push(c);
        }
    }
    let mut sims = features.matmul_t(&unit)?;
    for (r, &norm) in norms.iter().enumerate() {
        let row = sims.row_mut(r);
        if norm == 0.0 {
            row.iter_mut().for_each(|v| *v = ZERO_NORM_SIMILARITY);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        for &c in &degenerate {
            row[c] = ZERO_NORM_SIMILARITY;
        }
    }
    Ok((sims, degenerate))
}

/// Labels the `n` most prototype-similar samples of every cluster.
pub fn assign_labels(
    features: &Matrix,
    centers: &Matrix,
    cfg: &PseudoLabelConfig,
    assigner: &dyn LabelAssigner,
) -> Result<PseudoBatch> {
    if centers.rows() != cfg.k {
        return Err(SpiceError::shape(format!("{} centers", cfg.k), centers.rows()));
    }
    let n = cfg.labeled_count(features.rows())?;
    let (sims, degenerate) = prototype_similarity(features, centers)?;
    let mut nearest = Vec::with_capacity(cfg.k);
    for c in 0..cfg.k {
        if degenerate.contains(&c) {
            nearest.push(Vec::new());
        } else {
            nearest.push(top_k_indices(&sims.column(c), n)?);
        }
    }
    let (sample_indices, labels) = assigner.assign(&nearest, &sims).into_iter().unzip();
    Ok(PseudoBatch {
        sample_indices,
        labels,
        centers: centers.clone(),
        degenerate,
    })
}

/// Prototype estimation and label assignment for one batch, with the
/// assignment strategy resolved from the config.
#[derive(Debug)]
pub struct PseudoLabeler {
    cfg: PseudoLabelConfig,
    assigner: Box<dyn LabelAssigner>,
}

impl PseudoLabeler {
    pub fn new(cfg: PseudoLabelConfig) -> Result<Self> {
        if cfg.k < 2 {
            return Err(SpiceError::Config(format!("k must be >= 2, got {}", cfg.k)));
        }
        let assigner = assignment_registry().create(&cfg.assignment)?;
        Ok(Self { cfg, assigner })
    }

    pub fn config(&self) -> &PseudoLabelConfig {
        &self.cfg
    }

    /// Checks that a batch of `m` samples yields non-empty selections.
    pub fn check_batch_size(&self, m: usize) -> Result<()> {
        if m < self.cfg.k {
            return Err(SpiceError::Config(format!(
                "batch of {m} samples is smaller than k = {}",
                self.cfg.k
            )));
        }
        self.cfg.confident_count(m)?;
        self.cfg.labeled_count(m)?;
        Ok(())
    }

    pub fn label_batch(&self, features: &Matrix, probs: &Matrix) -> Result<PseudoBatch> {
        let centers = compute_prototypes(features, probs, &self.cfg)?;
        let mut batch = assign_labels(features, &centers, &self.cfg, self.assigner.as_ref())?;
        let mut used = vec![false; self.cfg.k];
        for row in probs.row_iter() {
            used[crate::numeric::argmax(row)] = true;
        }
        for (c, &u) in used.iter().enumerate() {
            if !u && !batch.degenerate.contains(&c) {
                batch.degenerate.push(c);
            }
        }
        batch.degenerate.sort_unstable();
        Ok(batch)
    }
}
