//! Self-labeling of classifier heads on frozen embeddings.
//!
//! Each epoch partitions the data into large batches. Per batch and per head:
//! predict on weakly perturbed features, derive pseudo-labels from
//! prototypes of the untouched features, then fit the head on strongly
//! perturbed copies of the labeled samples. After training, every head is
//! scored by the same loss over the whole dataset and the minimum wins.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{transform, EmbeddingDataset, Strength, TransformConfig};
use crate::error::{Result, SpiceError};
use crate::head::{init_head, Mlp};
use crate::loss::{make_loss, objective_and_grad, HeadLoss};
use crate::numeric::{streams, Matrix, RngState};
use crate::optim::{make_optimizer, Optimizer};
use crate::pseudo::{PseudoBatch, PseudoLabelConfig, PseudoLabeler};
use crate::registry::StrategySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub k: usize,
    /// Large-batch size `M`; `None` means `max(100·k, 1000)` capped at N.
    pub large_batch: Option<usize>,
    /// Inference chunk `m1`; numerically irrelevant.
    pub infer_chunk: usize,
    /// Training mini-batch `m2`.
    pub train_batch: usize,
    pub epochs: usize,
    pub num_heads: usize,
    pub loss: StrategySpec,
    pub entropy_weight: f64,
    pub confident_ratio: f64,
    pub assignment: StrategySpec,
    pub n_per_cluster: Option<usize>,
    /// Noise levels relative to the per-dimension feature std.
    pub transform: TransformConfig,
    pub optimizer: StrategySpec,
    pub seed: u64,
}

impl SelfTrainConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            large_batch: None,
            infer_chunk: 1000,
            train_batch: 128,
            epochs: 50,
            num_heads: 10,
            loss: StrategySpec::new("ds-ce"),
            entropy_weight: 0.0,
            confident_ratio: 0.5,
            assignment: StrategySpec::new("overlap"),
            n_per_cluster: None,
            transform: TransformConfig::default(),
            optimizer: StrategySpec::with_param("adam", crate::optim::DEFAULT_ADAM_LR),
            seed: 0,
        }
    }

    pub fn resolved_large_batch(&self, n: usize) -> usize {
        self.large_batch
            .unwrap_or_else(|| (100 * self.k).max(1000))
            .min(n)
    }

    pub fn pseudo_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            k: self.k,
            confident_ratio: self.confident_ratio,
            assignment: self.assignment.clone(),
            n_per_cluster: self.n_per_cluster,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k < 2 {
            return Err(SpiceError::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.num_heads == 0 {
            return Err(SpiceError::Config("need at least one head".into()));
        }
        let m = self.resolved_large_batch(n);
        if let Some(requested) = self.large_batch {
            if requested > n {
                return Err(SpiceError::Config(format!(
                    "large batch M={requested} exceeds dataset size N={n}"
                )));
            }
        }
        if self.train_batch == 0 || self.train_batch > m {
            return Err(SpiceError::Config(format!(
                "training mini-batch m2={} must lie in [1, M={m}]",
                self.train_batch
            )));
        }
        if self.infer_chunk == 0 {
            return Err(SpiceError::Config("inference chunk m1 must be >= 1".into()));
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(SpiceError::Config("entropy weight must be >= 0".into()));
        }
        self.transform.validate()?;
        PseudoLabeler::new(self.pseudo_config())?.check_batch_size(m)?;
        make_loss(&self.loss)?;
        make_optimizer(&self.optimizer)?;
        Ok(())
    }
}

/// Trained heads, their whole-dataset losses and the selected one.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPool {
    pub heads: Vec<Mlp>,
    pub per_head_loss: Vec<f64>,
    pub selected: Option<usize>,
}

impl HeadPool {
    pub fn selected_head(&self) -> Option<&Mlp> {
        self.selected.map(|i| &self.heads[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerateEvent {
    pub epoch: usize,
    pub head: usize,
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub pool: HeadPool,
    pub labels: Vec<usize>,
    pub probs: Matrix,
    /// `epoch_losses[e][h]`: mean training loss of head `h` during epoch `e`.
    pub epoch_losses: Vec<Vec<f64>>,
    pub degenerate: Vec<DegenerateEvent>,
    pub warnings: Vec<String>,
}

struct HeadTrainer {
    index: usize,
    head: Mlp,
    optimizer: Box<dyn Optimizer>,
    rng: RngState,
}

/// Split a random permutation of `0..n` into `⌊n/m⌋` near-equal batches.
fn partition(n: usize, m: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let parts = (n / m).max(1);
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

fn forward_chunked(head: &Mlp, x: &Matrix, chunk: usize) -> Result<Matrix> {
    if x.rows() <= chunk {
        return head.forward(x);
    }
    let mut out = Matrix::zeros(x.rows(), head.output_dim());
    let idx: Vec<usize> = (0..x.rows()).collect();
    for (c, rows) in idx.chunks(chunk).enumerate() {
        let p = head.forward(&x.select_rows(rows))?;
        let start = c * chunk * p.cols();
        out.as_mut_slice()[start..start + p.as_slice().len()].copy_from_slice(p.as_slice());
    }
    Ok(out)
}

/// Steps 1 and 2 for one head: predictions on weak views, then pseudo-labels
/// from prototypes of the untransformed features.
fn pseudo_label(
    head: &Mlp,
    features: &Matrix,
    transform_cfg: &TransformConfig,
    labeler: &PseudoLabeler,
    chunk: usize,
    rng: &mut RngState,
) -> Result<PseudoBatch> {
    let weak = transform(features, transform_cfg, Strength::Weak, rng);
    let probs = forward_chunked(head, &weak, chunk)?;
    labeler.label_batch(features, &probs)
}

struct BatchStats {
    loss_sum: f64,
    steps: usize,
    degenerate: Vec<usize>,
}

impl HeadTrainer {
    #[allow(clippy::too_many_arguments)]
    fn train_batch(
        &mut self,
        features: &Matrix,
        cfg: &SelfTrainConfig,
        transform_cfg: &TransformConfig,
        labeler: &PseudoLabeler,
        loss: &dyn HeadLoss,
    ) -> Result<BatchStats> {
        let m = features.rows();
        let batch = pseudo_label(
            &self.head,
            features,
            transform_cfg,
            labeler,
            cfg.infer_chunk,
            &mut self.rng,
        )?;
        if batch.is_empty() {
            return Ok(BatchStats {
                loss_sum: 0.0,
                steps: 0,
                degenerate: batch.degenerate,
            });
        }
        let selected = features.select_rows(&batch.sample_indices);
        let strong = transform(&selected, transform_cfg, Strength::Strong, &mut self.rng);
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(&mut self.rng);
        let steps = (m / cfg.train_batch).max(1);
        let size = cfg.train_batch.min(batch.len());
        let mut cursor = 0;
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let rows: Vec<usize> = (0..size).map(|i| order[(cursor + i) % order.len()]).collect();
            cursor = (cursor + size) % order.len();
            let x = strong.select_rows(&rows);
            let y: Vec<usize> = rows.iter().map(|&r| batch.labels[r]).collect();
            let (value, grads) = objective_and_grad(&self.head, &x, &y, loss, cfg.entropy_weight)?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(SpiceError::Diverged(format!(
                    "head {} produced a non-finite loss ({value}) after {} optimizer steps",
                    self.index,
                    self.optimizer.steps()
                )));
            }
            self.optimizer.step(self.head.params_mut(), &grads)?;
            loss_sum += value;
        }
        Ok(BatchStats {
            loss_sum,
            steps,
            degenerate: batch.degenerate,
        })
    }
}

/// Runs self-labeling on `dataset` and returns the selected head's labels.
pub fn train_self(dataset: &EmbeddingDataset, cfg: &SelfTrainConfig) -> Result<SelfTrainOutcome> {
    dataset.validate()?;
    let n = dataset.len();
    cfg.validate(n)?;
    let m = cfg.resolved_large_batch(n);
    let features = &dataset.features;
    let transform_cfg = cfg.transform.clone().calibrated(features);
    let labeler = PseudoLabeler::new(cfg.pseudo_config())?;
    let loss = make_loss(&cfg.loss)?;

    let mut trainers = (0..cfg.num_heads)
        .map(|h| {
            let mut rng = RngState::derive(cfg.seed, streams::HEAD_BASE + h as u64);
            Ok(HeadTrainer {
                index: h,
                head: init_head(dataset.dim(), cfg.k, &mut rng)?,
                optimizer: make_optimizer(&cfg.optimizer)?,
                rng,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut batch_rng = RngState::derive(cfg.seed, streams::BATCHES);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut degenerate = Vec::new();
    let mut warnings = Vec::new();
    let mut degenerate_streak = vec![0usize; cfg.num_heads];
    let mut warned = vec![false; cfg.num_heads];

    for epoch in 0..cfg.epochs {
        let batches = partition(n, m, &mut batch_rng);
        let mut sums = vec![0.0; cfg.num_heads];
        let mut counts = vec![0usize; cfg.num_heads];
        let mut flagged: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_heads];
        for batch in &batches {
            let fb = features.select_rows(batch);
            let stats: Vec<BatchStats> = trainers
                .par_iter_mut()
                .map(|t| t.train_batch(&fb, cfg, &transform_cfg, &labeler, loss.as_ref()))
                .collect::<Result<_>>()?;
            for (h, s) in stats.into_iter().enumerate() {
                sums[h] += s.loss_sum;
                counts[h] += s.steps;
                for c in s.degenerate {
                    if !flagged[h].contains(&c) {
                        flagged[h].push(c);
                    }
                }
            }
        }
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect();
        for (h, mut clusters) in flagged.into_iter().enumerate() {
            if clusters.is_empty() {
                degenerate_streak[h] = 0;
                continue;
            }
            clusters.sort_unstable();
            degenerate_streak[h] += 1;
            if degenerate_streak[h] > 1 && cfg.entropy_weight == 0.0 && !warned[h] {
                let msg = format!(
                    "head {h}: clusters {clusters:?} stayed degenerate for {} epochs; \
                     consider a positive entropy weight",
                    degenerate_streak[h]
                );
                log::warn!("{msg}");
                warnings.push(msg);
                warned[h] = true;
            }
            degenerate.push(DegenerateEvent {
                epoch,
                head: h,
                clusters,
            });
        }
        log::debug!("epoch {epoch}: head losses {means:?}");
        epoch_losses.push(means);
    }

    let heads: Vec<Mlp> = trainers.into_iter().map(|t| t.head).collect();
    let (per_head_loss, selected) = evaluate_heads(dataset, &heads, cfg)?;
    let (labels, probs) = predict(&heads[selected], dataset)?;
    Ok(SelfTrainOutcome {
        pool: HeadPool {
            heads,
            per_head_loss,
            selected: Some(selected),
        },
        labels,
        probs,
        epoch_losses,
        degenerate,
        warnings,
    })
}

/// Whole-dataset loss of every head (steps 1–3 with `M = N`, no updates) and
/// the index of the minimum, lowest index on ties. All heads see the same
/// perturbation draws.
pub fn evaluate_heads(
    dataset: &EmbeddingDataset,
    heads: &[Mlp],
    cfg: &SelfTrainConfig,
) -> Result<(Vec<f64>, usize)> {
    if heads.is_empty() {
        return Err(SpiceError::InvalidArgument("empty head pool".into()));
    }
    let features = &dataset.features;
    let transform_cfg = cfg.transform.clone().calibrated(features);
    let labeler = PseudoLabeler::new(cfg.pseudo_config())?;
    labeler.check_batch_size(features.rows())?;
    let loss = make_loss(&cfg.loss)?;
    let eval_rng = RngState::derive(cfg.seed, streams::EVAL);
    let losses: Vec<f64> = heads
        .par_iter()
        .map(|head| {
            let mut rng = eval_rng.clone();
            let batch = pseudo_label(head, features, &transform_cfg, &labeler, cfg.infer_chunk, &mut rng)?;
            if batch.is_empty() {
                return Ok(f64::INFINITY);
            }
            let selected = features.select_rows(&batch.sample_indices);
            let strong = transform(&selected, &transform_cfg, Strength::Strong, &mut rng);
            let probs = forward_chunked(head, &strong, cfg.infer_chunk)?;
            let value = loss.loss(&probs, &batch.labels)?;
            if value.is_nan() {
                return Err(SpiceError::Diverged("NaN loss while scoring heads".into()));
            }
            Ok(value)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok((losses, best))
}

/// Row-wise argmax labels and probabilities on untransformed features.
pub fn predict(head: &Mlp, dataset: &EmbeddingDataset) -> Result<(Vec<usize>, Matrix)> {
    head.predict(&dataset.features)
}
